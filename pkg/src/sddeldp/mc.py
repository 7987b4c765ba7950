"""Small-noise event probabilities and the extrapolated decay rate.

For each noise level the probability of an event is estimated either by
plain Monte Carlo or by importance sampling with a deterministic drift shift
(the minimiser from :func:`sddeldp.rate.minimize_rate`) and its Girsanov
weights.  A sweep over decreasing noise levels fits
``eps * log p = -rate + c * eps`` by weighted least squares and compares the
extrapolated rate with the variational value.

All sums over samples use :func:`math.fsum`, so estimates are exactly rounded
and do not depend on the order in which chunks are merged.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import CoefficientModel, Control, EventSpec, InitialSegment, SddeError, TimeGrid
from .rate import MinimizeConfig, RateMinResult, minimize_rate
from .sdde import RngStream, derive_stream, simulate_batch

__all__ = ["ProbEstimate", "SweepRow", "SweepResult", "FitError", "ReliabilityWarning",
           "estimate_prob", "epsilon_sweep", "derive_stream", "RngStream", "MIN_ESS"]

log = logging.getLogger(__name__)

MIN_ESS = 10.0
# sample-index offset between sweep rows: row r owns indices [r << 40, (r + 1) << 40)
_ROW_SHIFT = 40


class FitError(SddeError):
    pass


class ReliabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ProbEstimate:
    p_hat: float
    log_p_hat: float
    stderr: float
    n: int
    method: str
    ess: float = math.nan
    hits: int = 0
    notes: tuple = ()

    @property
    def reliable(self) -> bool:
        return not self.notes

    def as_dict(self) -> dict:
        return {"p_hat": self.p_hat, "log_p_hat": _json_float(self.log_p_hat),
                "stderr": self.stderr, "n": self.n, "method": self.method,
                "ess": _json_float(self.ess), "hits": self.hits, "notes": list(self.notes)}


def _json_float(v):
    return v if math.isfinite(v) else str(v)


def estimate_prob(model: CoefficientModel, phi: InitialSegment, eps: float, event: EventSpec,
                  n_samples: int, grid: TimeGrid, scheme: str = "tamed_euler", seed: int = 0,
                  is_control: Optional[Control] = None, first_index: int = 0,
                  n_threads: Optional[int] = None) -> ProbEstimate:
    """Estimate ``P(X^eps in event)``.

    Plain mode counts hits and reports the Wald standard error.  With
    ``is_control`` the paths follow the controlled dynamics and each hit is
    weighted by its Girsanov likelihood ratio; the standard error is that of
    the weighted indicators and ``ess = (sum w)^2 / sum w^2`` over hits.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    method = "plain" if is_control is None else "importance"
    if event.is_certain():
        return ProbEstimate(1.0, 0.0, 0.0, int(n_samples), method,
                            float(n_samples) if method == "importance" else math.nan,
                            int(n_samples))

    def reducer(vals, logw):
        return event.contains(vals, grid), logw

    hit, logw = simulate_batch(model, phi, eps, grid, scheme, seed, n_samples, is_control,
                               reducer=reducer, first_index=first_index, n_threads=n_threads)
    n = int(n_samples)
    hits = int(np.count_nonzero(hit))
    notes = []
    if method == "plain":
        p = hits / n
        se = math.sqrt(p * (1.0 - p) / n)
        ess = math.nan
        if hits == 0:
            notes.append("no hits: log p is -inf; use importance sampling")
        log_p = math.log(p) if hits else -math.inf
    else:
        lw = logw[hit]
        if not np.all(np.isfinite(lw)):
            raise SddeError("importance weights are not finite (eps = 0 with a nonzero control?)")
        if hits == 0:
            p, se, ess, log_p = 0.0, 0.0, 0.0, -math.inf
            notes.append("no weighted hits: log p is -inf")
        else:
            top = float(np.max(lw))
            w = np.exp(lw - top)
            s1 = math.fsum(w)
            s2 = math.fsum(w * w)
            mean_scaled = s1 / n
            var_scaled = max(s2 / n - mean_scaled ** 2, 0.0) * n / max(n - 1, 1)
            log_p = top + math.log(mean_scaled)
            p = math.exp(log_p)
            se = math.exp(top) * math.sqrt(var_scaled / n)
            ess = s1 * s1 / s2
        if ess < MIN_ESS:
            notes.append(f"effective sample size {ess:.3g} below {MIN_ESS:g}")
        if p > 1.0:
            p, log_p = 1.0, 0.0
    for note in notes:
        warnings.warn(f"eps={eps:g}: {note}", ReliabilityWarning, stacklevel=2)
    return ProbEstimate(p, log_p, se, n, method, ess, hits, tuple(notes))


@dataclass(frozen=True)
class SweepRow:
    eps: float
    estimate: ProbEstimate

    @property
    def eps_log_p(self) -> float:
        return self.eps * self.estimate.log_p_hat

    @property
    def eps_log_p_stderr(self) -> float:
        """Delta-method standard error of ``eps * log p_hat``."""
        e = self.estimate
        if e.p_hat <= 0:
            return math.inf
        return self.eps * e.stderr / e.p_hat


@dataclass(frozen=True)
class SweepResult:
    rows: tuple
    extrapolated_rate: float
    rate_stderr: float
    slope: float
    variational_value: float
    used_rows: int
    minimizer: Optional[RateMinResult] = field(default=None, repr=False)
    notes: tuple = ()

    @property
    def gap(self) -> float:
        return abs(self.extrapolated_rate - self.variational_value)

    def summary(self) -> dict:
        return {"extrapolated_rate": self.extrapolated_rate, "rate_stderr": self.rate_stderr,
                "slope": self.slope, "variational_value": self.variational_value,
                "gap": self.gap, "used_rows": self.used_rows, "notes": list(self.notes)}

    def csv_rows(self) -> list:
        return [{"eps": r.eps, "p_hat": r.estimate.p_hat, "stderr": r.estimate.stderr,
                 "eps_log_p": r.eps_log_p, "ess": r.estimate.ess} for r in self.rows]


def _fit_rate(rows):
    """Weighted least squares of ``eps * log p`` on ``(1, eps)``.

    Known-variance weights; the covariance is inflated by the reduced chi-square
    when the line misfits the data (it never shrinks below the known-variance one).
    """
    eps = np.array([r.eps for r in rows])
    y = np.array([r.eps_log_p for r in rows])
    sd = np.array([r.eps_log_p_stderr for r in rows])
    floor = 1e-12 * max(1.0, float(np.max(np.abs(y))))
    var = np.maximum(sd, floor) ** 2
    X = np.column_stack([np.ones_like(eps), eps])
    W = 1.0 / var
    A = X.T @ (W[:, None] * X)
    coef = np.linalg.solve(A, X.T @ (W * y))
    cov = np.linalg.inv(A)
    dof = len(rows) - 2
    if dof > 0:
        chi2 = float(np.sum(W * (y - X @ coef) ** 2)) / dof
        cov = cov * max(1.0, chi2)
    return float(coef[0]), float(coef[1]), float(math.sqrt(cov[0, 0]))


def epsilon_sweep(model: CoefficientModel, phi: InitialSegment, eps_list: Sequence[float],
                  event: EventSpec, n_per_eps: int, grid: TimeGrid, scheme: str = "tamed_euler",
                  seed: int = 0, use_is: bool = True, budget: str = "uniform",
                  min_cfg: MinimizeConfig = MinimizeConfig(),
                  n_threads: Optional[int] = None) -> SweepResult:
    """Estimate the event probability over decreasing noise levels and extrapolate the rate.

    The importance control (when ``use_is``) is the noise-independent
    minimiser of the rate over the event, computed once.  Rows whose estimate
    is ``log p = -inf`` are dropped from the fit with a warning; fewer than three
    usable rows raise :class:`FitError`.  ``budget="geometric"`` scales the
    sample count by ``eps_0 / eps``.
    """
    eps_arr = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_arr) or any(a <= b for a, b in zip(eps_arr, eps_arr[1:])):
        raise ValueError("eps_list must be positive and strictly decreasing")
    if budget not in ("uniform", "geometric"):
        raise ValueError(f"unknown budget {budget!r}")
    minimizer = None
    variational = math.nan
    if event.is_certain():
        variational = 0.0
    elif event.is_endpoint:
        minimizer = minimize_rate(model, phi, event, grid, min_cfg)
        variational = minimizer.value
    ctrl = minimizer.control if (use_is and minimizer is not None) else None
    rows = []
    notes = []
    for r, eps in enumerate(eps_arr):
        n = n_per_eps if budget == "uniform" else int(round(n_per_eps * eps_arr[0] / eps))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            est = estimate_prob(model, phi, eps, event, n, grid, scheme, seed, ctrl,
                                first_index=r << _ROW_SHIFT, n_threads=n_threads)
        for w in caught:
            notes.append(str(w.message))
            warnings.warn(w.message, w.category, stacklevel=2)
        rows.append(SweepRow(eps, est))
        log.info("eps=%g p=%.4g se=%.2g eps*log p=%.5g", eps, est.p_hat, est.stderr,
                 rows[-1].eps_log_p)
    usable = [row for row in rows if math.isfinite(row.estimate.log_p_hat)]
    if len(usable) < len(rows):
        msg = f"{len(rows) - len(usable)} row(s) with zero estimate excluded from the fit"
        notes.append(msg)
        warnings.warn(msg, ReliabilityWarning, stacklevel=2)
    if len(usable) < 3:
        raise FitError(f"only {len(usable)} usable rows; need at least 3 for the rate fit")
    intercept, slope, se = _fit_rate(usable)
    return SweepResult(tuple(rows), -intercept, se, slope, variational, len(usable), minimizer,
                       tuple(notes))
