import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sddeldp import (Control, Declared, EventSpec, GridAlignmentError, InitialSegment,
                     ModelEvaluationError, Trajectory, builtin_model, check_assumptions, eval_path,
                     l2_norm_sq, make_grid, op_G, read_control_csv, read_path_csv,
                     write_control_csv, write_path_csv)

from conftest import scalar_model


# --- grids -----------------------------------------------------------------

def test_grid_exact_division():
    g = make_grid(1, 0.25, 0.5)
    assert (g.n_steps, g.n_history) == (4, 2)
    assert g.n_nodes == 7
    np.testing.assert_allclose(g.times, [-0.5, -0.25, 0, 0.25, 0.5, 0.75, 1.0])


def test_grid_misaligned_names_ratio():
    with pytest.raises(GridAlignmentError, match="tau/h"):
        make_grid(1, 0.3, 0.5)
    with pytest.raises(GridAlignmentError, match="T/h"):
        make_grid(1.05, 0.1, 0.5)


def test_grid_fine():
    g = make_grid(2, 0.01, 1)
    assert (g.n_steps, g.n_history) == (200, 100)
    assert g.n_steps * g.h == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("bad", [(0, 0.1, 1), (1, -0.1, 1), (1, 0.1, 0), (1, math.nan, 1)])
def test_grid_rejects_nonpositive(bad):
    with pytest.raises(GridAlignmentError):
        make_grid(*bad)


@given(st.integers(1, 50), st.integers(1, 50), st.sampled_from([0.1, 0.01, 0.05, 0.125, 1e-3]))
def test_grid_invariants(n_T, n_tau, h):
    g = make_grid(n_T * h, h, n_tau * h)
    assert g.n_steps == n_T and g.n_history == n_tau
    assert g.n_history * g.h == pytest.approx(g.tau, rel=1e-12)
    assert abs(g.n_steps * g.h - g.T) <= 4 * np.spacing(g.T)


# --- controls and the integral operator --------------------------------------

def test_l2_norm_examples():
    g = make_grid(1, 0.5, 0.5)
    assert l2_norm_sq(Control.zeros(g)) == 0.0
    assert l2_norm_sq(Control.constant(g, [2.0])) == 4.0


@given(arrays(float, (40, 2), elements=st.floats(-10, 10)))
def test_l2_norm_matches_bruteforce(vals):
    g = make_grid(0.4, 0.01, 0.1)
    brute = 0.0
    for row in vals:
        for v in row:
            brute += 0.01 * v * v
    assert l2_norm_sq(Control(g, vals)) == pytest.approx(brute, rel=1e-12, abs=1e-300)


def test_op_G_zero_and_constant():
    g = make_grid(1, 0.1, 0.5)
    np.testing.assert_array_equal(op_G(Control.zeros(g)), 0.0)
    G = op_G(Control.constant(g, [3.0]))
    np.testing.assert_allclose(G[:, 0], 3.0 * np.arange(11) * 0.1, atol=1e-14)
    assert G[0, 0] == 0.0


@settings(max_examples=60)
@given(arrays(float, (50, 1), elements=st.floats(-20, 20)), st.floats(0.01, 10))
def test_op_G_modulus(vals, alpha):
    g = make_grid(0.5, 0.01, 0.1)
    ctrl = Control(g, vals)
    nrm = l2_norm_sq(ctrl)
    if nrm > 0:
        ctrl = Control(g, vals * math.sqrt(alpha / nrm) * (1 - 1e-12))
    G = op_G(ctrl)[:, 0]
    t = np.arange(len(G)) * g.h
    dG = np.abs(G[:, None] - G[None, :])
    bound = np.sqrt(alpha * np.abs(t[:, None] - t[None, :])) + 1e-12
    assert np.all(dG <= bound)


@given(arrays(float, (20, 2), elements=st.floats(-5, 5)),
       arrays(float, (20, 2), elements=st.floats(-5, 5)), st.floats(-3, 3))
def test_op_G_linear(a1, a2, c):
    g = make_grid(0.2, 0.01, 0.1)
    lhs = op_G(Control(g, c * a1 + a2))
    rhs = c * op_G(Control(g, a1)) + op_G(Control(g, a2))
    scale = max(1.0, float(np.max(np.abs(lhs))))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * scale * 20)


# --- paths -------------------------------------------------------------------

def _ramp():
    g = make_grid(1, 0.25, 0.5)
    return Trajectory(g, g.times[:, None] ** 2, "skeleton")


def test_eval_path_nodes_and_midpoints():
    tr = _ramp()
    for t, v in zip(tr.times, tr.values):
        assert eval_path(tr, t)[0] == v[0]
    assert eval_path(tr, 0.125)[0] == pytest.approx(0.5 * (0.0 + 0.0625))
    assert eval_path(tr, -0.375)[0] == pytest.approx(0.5 * (0.25 + 0.0625))


def test_eval_path_out_of_range():
    tr = _ramp()
    with pytest.raises(ValueError):
        eval_path(tr, 1.25)
    with pytest.raises(ValueError):
        eval_path(tr, -0.75)


@given(st.floats(-0.5, 1.0))
def test_eval_path_between_neighbours(t):
    tr = _ramp()
    v = eval_path(tr, t)[0]
    j = min(int(np.floor((t + 0.5) / 0.25)), tr.grid.n_nodes - 2)
    lo, hi = sorted(tr.values[j:j + 2, 0])
    assert lo - 1e-12 <= v <= hi + 1e-12


def test_initial_segment_exact_at_nodes():
    g = make_grid(1, 0.1, 0.5)
    phi = InitialSegment.from_function(g, lambda t: [math.cos(t)])
    np.testing.assert_array_equal(phi.samples[:, 0], np.cos(g.times[:6]))
    with pytest.raises(ValueError):
        InitialSegment(g, np.zeros(5))


def test_csv_round_trip(tmp_path):
    g = make_grid(1, 0.1, 0.3)
    rng = np.random.default_rng(0)
    tr = Trajectory(g, rng.normal(size=(g.n_nodes, 2)), "sdde")
    p = tmp_path / "path.csv"
    write_path_csv(tr, p)
    back = read_path_csv(p)
    assert back.grid.same_as(g)
    np.testing.assert_array_equal(back.values, tr.values)
    assert p.read_text().splitlines()[0] == "t,v0,v1"
    ctrl = Control(g, rng.normal(size=(g.n_steps, 1)))
    q = tmp_path / "ctrl.csv"
    write_control_csv(ctrl, q)
    np.testing.assert_array_equal(read_control_csv(q, g).values, ctrl.values)
    with pytest.raises(GridAlignmentError):
        read_control_csv(q, make_grid(2, 0.1, 0.3))
    buf = io.StringIO()
    write_path_csv(tr, buf)
    assert buf.getvalue().startswith("t,v0,v1")


# --- events ------------------------------------------------------------------

def test_events_membership():
    g = make_grid(1, 0.5, 0.5)
    path = np.array([[0.0], [0.0], [0.4], [1.2]])
    assert EventSpec.halfspace(0, 1.0).contains(path)
    assert not EventSpec.halfspace(0, 1.0, -1).contains(path)
    assert EventSpec.halfspace(0, -math.inf).is_certain()
    assert EventSpec.ball_exterior([0.0], 1.0).contains(path)
    assert not EventSpec.ball_exterior([1.0], 0.5).contains(path)
    ref = Trajectory(g, np.zeros((4, 1)), "skeleton")
    tube = EventSpec.tube_exit(ref, 1.0)
    assert tube.contains(path, g)
    assert not EventSpec.tube_exit(ref, 1.5).contains(path, g)
    batch = np.stack([path, -path, path * 0])
    np.testing.assert_array_equal(EventSpec.halfspace(0, 1.0).contains(batch), [True, False, False])


def test_tube_reference_must_share_grid():
    ref = Trajectory(make_grid(1, 0.25, 0.5), np.zeros((7, 1)), "skeleton")
    with pytest.raises(ValueError):
        EventSpec.tube_exit(ref, 0.1).contains(np.zeros((4, 1)))


# --- declared constants and the assumption checker ---------------------------

def test_declared_validation():
    with pytest.raises(ValueError):
        Declared(q=0.5, eta=2)
    with pytest.raises(ValueError):
        Declared(q=1, eta=1)
    with pytest.raises(ValueError):
        Declared(q=1, eta=2, K1=-1)
    with pytest.raises(ValueError):
        Declared(q=1, eta=math.inf)
    assert Declared(q=3, eta=6).gate() and not Declared(q=3, eta=5).gate()


def test_checker_const_sigma_all_pass():
    rep = check_assumptions(builtin_model("cubic_const_sigma"), n_points=20_000)
    assert rep.all_pass
    assert rep.theorem_gate_pass
    assert rep.largest_feasible_eta == 64.0
    # sup of (dx^2 + dx dy - dx^2 (x1^2 + x1 x2 + x2^2)) / (dx^2 + dy^2) is (1 + sqrt 2) / 2
    assert rep["monotone"].worst_ratio <= (1 + math.sqrt(2)) / 2 + 1e-9


def test_checker_quadratic_sigma_fails_monotone():
    rep = check_assumptions(builtin_model("cubic_quadratic_sigma"), n_points=20_000)
    assert not rep["monotone"].passed
    assert not rep.theorem_gate_pass
    assert rep.largest_feasible_eta < 5
    wp = rep["monotone"].worst_point
    assert set(wp) == {"t", "x1", "x2", "y1", "y2"}


def test_checker_zero_model_passes_anything():
    zero = scalar_model(lambda t, x, y: 0 * x, lambda t, x, y: 0 * x,
                        declared=Declared(q=1, eta=2))
    rep = check_assumptions(zero, n_points=2_000)
    assert rep.all_pass
    assert rep.largest_feasible_eta == 64.0


def test_checker_reports_nonfinite_point():
    bad = scalar_model(lambda t, x, y: np.where(x > 0, np.inf, x), lambda t, x, y: 1 + 0 * x)
    with pytest.raises(ModelEvaluationError) as ei:
        check_assumptions(bad, n_points=100)
    assert ei.value.point is not None


def test_checker_deterministic():
    m = builtin_model("cubic_quadratic_sigma")
    a = check_assumptions(m, n_points=5_000, seed=7).as_dict()
    b = check_assumptions(m, n_points=5_000, seed=7).as_dict()
    assert a == b


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32), st.integers(10, 3_000), st.integers(1, 3_000))
def test_checker_more_points_never_rescues(seed, n, extra):
    m = builtin_model("cubic_quadratic_sigma").with_declared(K2=1.15, K4=2.0, K6=2.0)
    small = check_assumptions(m, n_points=n, seed=seed)
    big = check_assumptions(m, n_points=n + extra, seed=seed)
    for rs, rb in zip(small.conditions, big.conditions):
        assert rb.worst_ratio >= rs.worst_ratio
        if not rs.passed:
            assert not rb.passed
    assert big.largest_feasible_eta <= small.largest_feasible_eta


@settings(max_examples=20, deadline=None)
@given(st.floats(1, 5), st.floats(1.01, 30), st.floats(0.5, 3))
def test_gate_matches_eta(q, eta, k2):
    m = builtin_model("cubic_quadratic_sigma").with_declared(q=q, eta=eta, K2=k2)
    rep = check_assumptions(m, n_points=500)
    assert rep.theorem_gate_pass == (rep.largest_feasible_eta > 2 * q - 1)
