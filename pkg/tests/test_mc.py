import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp, norm

from sddeldp import (Control, EventSpec, FitError, InitialSegment, ProbEstimate, ReliabilityWarning,
                     RngStream, SweepRow, builtin_model, derive_stream, epsilon_sweep,
                     estimate_prob, make_grid, minimize_rate)
from sddeldp.mc import _fit_rate

OU_RATE = 1 / (1 - math.exp(-2))


def _phi(g, v=0.0):
    return InitialSegment.constant(g, [v])


@pytest.fixture(scope="module")
def g():
    return make_grid(1, 0.01, 1)


@pytest.fixture(scope="module")
def ou_control(g):
    return minimize_rate(builtin_model("linear_ou"), _phi(g), EventSpec.halfspace(0, 1.0), g).control


# --- streams -----------------------------------------------------------------

def test_streams_identical_and_independent():
    a, b = derive_stream(42, 0), derive_stream(42, 0)
    assert a == b
    np.testing.assert_array_equal(a.normals(100, 1), b.normals(100, 1))
    x = derive_stream(42, 0).normals(10_000, 1)[:, 0]
    y = derive_stream(42, 1).normals(10_000, 1)[:, 0]
    assert ks_2samp(x, y).pvalue > 1e-3
    assert abs(np.corrcoef(x, y)[0, 1]) < 4 / math.sqrt(10_000)


@given(st.integers(0, 2**64 - 1), st.integers(1, 500))
def test_streams_partition_indices(seed, n):
    keys = {derive_stream(seed, k).key for k in range(n)}
    assert len(keys) == n
    assert {derive_stream(seed, k).stream_id for k in range(n)} == set(range(n))


def test_stream_range_checked():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(0, 2**64)


def test_stream_draws_are_prefix_stable():
    s = RngStream(9, 3)
    np.testing.assert_array_equal(s.normals(50, 2)[:10], s.normals(10, 2))


# --- single-noise estimates --------------------------------------------------

def test_certain_event(g, ou_control):
    m = builtin_model("linear_ou")
    ev = EventSpec.halfspace(0, -math.inf)
    for ctrl in (None, ou_control):
        e = estimate_prob(m, _phi(g), 0.1, ev, 100, g, is_control=ctrl)
        assert e.p_hat == 1.0 and e.log_p_hat == 0.0 and e.stderr == 0.0


def test_plain_matches_gaussian():
    g = make_grid(1, 0.002, 1)
    e = estimate_prob(builtin_model("linear_ou"), _phi(g), 0.5, EventSpec.halfspace(0, 0.5), 100_000,
                      g, "euler", seed=0)
    exact = norm.sf(0.5 / math.sqrt(0.5 * (1 - math.exp(-2)) / 2))
    assert abs(e.p_hat - exact) <= 3 * e.stderr
    assert e.p_hat == e.hits / e.n
    assert e.method == "plain" and math.isnan(e.ess)


def test_importance_unbiased_moderate_event(g):
    m = builtin_model("linear_ou")
    ev = EventSpec.halfspace(0, 0.6)
    ctrl = minimize_rate(m, _phi(g), ev, g).control
    plain = estimate_prob(m, _phi(g), 0.5, ev, 40_000, g, "euler", seed=31)
    imp = estimate_prob(m, _phi(g), 0.5, ev, 40_000, g, "euler", seed=32, is_control=ctrl)
    assert 0.05 < plain.p_hat < 0.2
    assert abs(plain.p_hat - imp.p_hat) <= 3 * math.hypot(plain.stderr, imp.stderr)
    assert imp.method == "importance" and imp.ess > 1_000


def test_zero_hits_warns(g):
    with pytest.warns(ReliabilityWarning, match="importance"):
        e = estimate_prob(builtin_model("linear_ou"), _phi(g), 0.01, EventSpec.halfspace(0, 1.0),
                          500, g)
    assert e.p_hat == 0 and e.log_p_hat == -math.inf and not e.reliable


def test_low_ess_warns(g):
    m = builtin_model("linear_ou")
    bad = Control.constant(g, [-3.0])
    with pytest.warns(ReliabilityWarning, match="effective sample size"):
        e = estimate_prob(m, _phi(g), 0.1, EventSpec.halfspace(0, 0.5), 200, g, is_control=bad)
    assert e.ess < 10


def test_is_variance_win(g, ou_control):
    m = builtin_model("linear_ou")
    ev = EventSpec.halfspace(0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ReliabilityWarning)
        plain = estimate_prob(m, _phi(g), 0.02, ev, 10_000, g, seed=1)
    imp = estimate_prob(m, _phi(g), 0.02, ev, 10_000, g, seed=2, is_control=ou_control)
    assert imp.ess / imp.n >= 10 * plain.hits / plain.n
    assert imp.ess >= 10 * max(plain.hits, 1)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 0.5), st.floats(-0.5, 1.5), st.integers(0, 1000))
def test_estimates_in_unit_interval(eps, a, seed):
    g = make_grid(1, 0.05, 1)
    m = builtin_model("linear_ou")
    ev = EventSpec.halfspace(0, a)
    ctrl = Control.constant(g, [max(a, 0.0)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ReliabilityWarning)
        for c in (None, ctrl):
            e = estimate_prob(m, _phi(g), eps, ev, 300, g, seed=seed, is_control=c)
            assert 0.0 <= e.p_hat <= 1.0 and e.stderr >= 0.0


def test_invalid_sample_count(g):
    with pytest.raises(ValueError):
        estimate_prob(builtin_model("linear_ou"), _phi(g), 0.1, EventSpec.halfspace(0, 1), 0, g)


# --- sweeps ------------------------------------------------------------------

def test_brownian_sweep_rate(g):
    res = epsilon_sweep(builtin_model("brownian"), _phi(g), [0.2, 0.1, 0.05, 0.02],
                        EventSpec.halfspace(0, 1.0), 20_000, g, "euler", seed=4)
    assert res.extrapolated_rate == pytest.approx(0.5, rel=0.10)
    assert res.variational_value == pytest.approx(0.5, rel=1e-3)
    assert [r.eps for r in res.rows] == [0.2, 0.1, 0.05, 0.02]


def test_interior_event_rate_zero(g):
    res = epsilon_sweep(builtin_model("linear_ou"), _phi(g, 1.0), [0.2, 0.1, 0.05, 0.02],
                        EventSpec.halfspace(0, -1.0), 5_000, g, seed=1)
    assert all(r.estimate.p_hat > 0.99 for r in res.rows)
    assert res.rows[-1].estimate.p_hat == 1.0
    assert abs(res.extrapolated_rate) < 0.01
    assert res.variational_value <= 1e-6


def test_upper_bound_direction(g):
    res = epsilon_sweep(builtin_model("linear_ou"), _phi(g), [0.2, 0.1, 0.05, 0.02],
                        EventSpec.halfspace(0, 1.0), 20_000, g, "euler", seed=8)
    for r in res.rows:
        assert r.eps_log_p <= -res.variational_value + 3 * r.eps_log_p_stderr + 0.25 * r.eps


def test_sweep_reproducible_and_budget(g):
    args = (builtin_model("linear_ou"), _phi(g), [0.2, 0.1, 0.05], EventSpec.halfspace(0, 1.0), 2_000, g)
    a = epsilon_sweep(*args, seed=3)
    b = epsilon_sweep(*args, seed=3)
    assert a.summary() == b.summary() and a.csv_rows() == b.csv_rows()
    geo = epsilon_sweep(*args, seed=3, budget="geometric")
    assert [r.estimate.n for r in geo.rows] == [2_000, 4_000, 8_000]


def test_sweep_validation(g):
    m = builtin_model("linear_ou")
    ev = EventSpec.halfspace(0, 1.0)
    with pytest.raises(ValueError):
        epsilon_sweep(m, _phi(g), [0.1, 0.2, 0.05], ev, 10, g)
    with pytest.raises(ValueError):
        epsilon_sweep(m, _phi(g), [0.2, 0.1, 0.0], ev, 10, g)
    with pytest.raises(ValueError):
        epsilon_sweep(m, _phi(g), [0.2, 0.1, 0.05], ev, 10, g, budget="linear")
    with pytest.raises(FitError):
        epsilon_sweep(m, _phi(g), [0.2, 0.1], ev, 200, g)


def test_sweep_drops_empty_rows(g):
    with pytest.warns(ReliabilityWarning):
        with pytest.raises(FitError, match="usable"):
            epsilon_sweep(builtin_model("linear_ou"), _phi(g), [0.1, 0.05, 0.02, 0.01],
                          EventSpec.halfspace(0, 1.5), 300, g, use_is=False)


def test_fit_recovers_exact_line():
    rows = []
    for e in (0.2, 0.1, 0.05, 0.02):
        lp = (-1.3 + 0.7 * e) / e
        rows.append(SweepRow(e, ProbEstimate(math.exp(lp), lp, 0.01 * math.exp(lp), 100, "importance")))
    intercept, slope, se = _fit_rate(rows)
    assert intercept == pytest.approx(-1.3, abs=1e-10)
    assert slope == pytest.approx(0.7, abs=1e-9)


@pytest.mark.xfail(strict=True, reason=(
    "the linear fit eps*log p = -I + c*eps omits the eps*log(eps) prefactor term of Gaussian tails; "
    "on exact probabilities its intercept is biased by about 2% (OU) and 4% (Brownian), "
    "far beyond the fit standard error at 1e5 samples per row"))
def test_fit_intercept_within_reported_uncertainty(g):
    res = epsilon_sweep(builtin_model("brownian"), _phi(g), [0.2, 0.1, 0.05, 0.02],
                        EventSpec.halfspace(0, 1.0), 100_000, g, "euler", seed=12)
    assert abs(res.extrapolated_rate - res.variational_value) <= res.rate_stderr
