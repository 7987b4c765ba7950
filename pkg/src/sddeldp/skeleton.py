"""Deterministic controlled delay ODE (the skeleton equation).

Two solvers are provided.  ``steps_rk4`` is the classical fourth-order
Runge-Kutta method marched by the method of steps: since ``tau`` is a whole
number of steps, the delayed argument of every stage lies in the part of the
path that is already known and is read by linear interpolation.
``picard_truncated`` solves the same discretisation as the fixed point of the
map that freezes the diffusion (truncated at level ``n``) along a guess path,
window by window; it is slower and exists to cross-check the direct solver
and the truncation argument behind existence.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (BlowUpError, CoefficientModel, Control, InitialSegment, SddeError,
                   TimeGrid, Trajectory, l2_norm_sq)

__all__ = ["SkeletonConfig", "solve_skeleton", "solve_skeleton_batch", "truncate_sigma",
           "apriori_bound", "PicardDivergenceError", "TruncationActiveError"]

log = logging.getLogger(__name__)


class PicardDivergenceError(SddeError):
    pass


class TruncationActiveError(SddeError):
    pass


@dataclass(frozen=True)
class SkeletonConfig:
    method: str = "steps_rk4"
    truncation_level: Optional[float] = None   # None: 2 * sqrt(apriori_bound)
    max_sweeps: int = 200
    tol: float = 1e-12
    contraction_target: float = 0.9

    def __post_init__(self):
        if self.method not in ("steps_rk4", "picard_truncated"):
            raise ValueError(f"unknown skeleton method {self.method!r}")
        if self.truncation_level is not None and self.truncation_level < 1:
            raise ValueError("truncation level must be >= 1")
        if not (self.tol > 0 and self.max_sweeps >= 1):
            raise ValueError("tolerances must be positive")


def _check_inputs(model, phi, ctrl, grid):
    if not math.isclose(model.tau, grid.tau, rel_tol=1e-12):
        raise ValueError(f"model tau={model.tau} differs from grid tau={grid.tau}")
    if phi.grid.n_history != grid.n_history or not math.isclose(phi.grid.h, grid.h, rel_tol=1e-12):
        raise ValueError("initial segment is sampled on a different history grid")
    if phi.d != model.d:
        raise ValueError(f"initial segment has dimension {phi.d}, model has d={model.d}")
    if ctrl is not None:
        if ctrl.grid.n_steps != grid.n_steps or ctrl.m != model.m:
            raise ValueError("control does not match the grid or the noise dimension")


def _field(model, t, x, y, u):
    return model.drift(t, x, y) + np.einsum("...ij,...j->...i", model.diffusion(t, x, y), u)


def rk4_march(model: CoefficientModel, grid: TimeGrid, values: np.ndarray, ctrl: np.ndarray,
              k_start: int = 0, k_end: Optional[int] = None, stages: Optional[dict] = None,
              forcing: Optional[np.ndarray] = None) -> np.ndarray:
    """Advance ``values`` (shape ``(..., n_nodes, d)``) in place over steps ``[k_start, k_end)``.

    ``ctrl`` has shape ``(..., n_steps, m)``.  With ``forcing`` (shape
    ``(n_steps, 3, d)``: left, middle, right) the diffusion term is replaced by
    that precomputed input.  When ``stages`` is a dict it receives the stage
    states ``X`` and delayed arguments ``Y`` with shape ``(..., n_steps, 4, d)``.
    """
    h, nh = grid.h, grid.n_history
    k_end = grid.n_steps if k_end is None else k_end
    if stages is not None:
        shp = values.shape[:-2] + (grid.n_steps, 4, values.shape[-1])
        stages.setdefault("X", np.zeros(shp))
        stages.setdefault("Y", np.zeros(shp))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(k_start, k_end):
            t = k * h
            j = nh + k
            x = values[..., j, :]
            y0 = values[..., k, :]
            y1 = values[..., k + 1, :]
            ym = 0.5 * (y0 + y1)
            if forcing is None:
                u = ctrl[..., k, :]
                k1 = _field(model, t, x, y0, u)
                x2 = x + 0.5 * h * k1
                k2 = _field(model, t + 0.5 * h, x2, ym, u)
                x3 = x + 0.5 * h * k2
                k3 = _field(model, t + 0.5 * h, x3, ym, u)
                x4 = x + h * k3
                k4 = _field(model, t + h, x4, y1, u)
            else:
                fl, fm, fr = forcing[k]
                k1 = model.drift(t, x, y0) + fl
                x2 = x + 0.5 * h * k1
                k2 = model.drift(t + 0.5 * h, x2, ym) + fm
                x3 = x + 0.5 * h * k2
                k3 = model.drift(t + 0.5 * h, x3, ym) + fm
                x4 = x + h * k3
                k4 = model.drift(t + h, x4, y1) + fr
            nxt = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(nxt)):
                raise BlowUpError(f"skeleton state non-finite at node t={(k + 1) * h:g} "
                                  f"(step {k + 1})", step=k + 1)
            values[..., j + 1, :] = nxt
            if stages is not None:
                stages["X"][..., k, :, :] = np.stack([x, x2, x3, x4], axis=-2)
                stages["Y"][..., k, :, :] = np.stack([y0, ym, ym, y1], axis=-2)
    return values


def _initial_array(phi, grid, batch=()):
    values = np.zeros(tuple(batch) + (grid.n_nodes, phi.d))
    values[..., : grid.n_history + 1, :] = phi.samples
    return values


def solve_skeleton(model: CoefficientModel, phi: InitialSegment, ctrl: Optional[Control],
                   grid: TimeGrid, cfg: SkeletonConfig = SkeletonConfig()) -> Trajectory:
    """Solve ``z' = b(t, z(t), z(t - tau)) + sigma(t, z(t), z(t - tau)) phi(t)`` with ``z = phi`` on ``[-tau, 0]``."""
    if ctrl is None:
        ctrl = Control.zeros(grid, model.m)
    _check_inputs(model, phi, ctrl, grid)
    if cfg.method == "picard_truncated":
        values = _solve_picard(model, phi, ctrl, grid, cfg)
    else:
        values = rk4_march(model, grid, _initial_array(phi, grid), np.asarray(ctrl.values))
    return Trajectory(grid, values, "skeleton")


def solve_skeleton_batch(model: CoefficientModel, phi: InitialSegment, controls: np.ndarray,
                         grid: TimeGrid, stages: Optional[dict] = None) -> np.ndarray:
    """RK4 solves for a stack of controls ``(B, n_steps, m)``; returns ``(B, n_nodes, d)``."""
    controls = np.asarray(controls, dtype=float)
    values = _initial_array(phi, grid, controls.shape[:-2])
    return rk4_march(model, grid, values, controls, stages=stages)


# ---------------------------------------------------------------------------
# truncation and the Picard construction


def _cutoff(r, n):
    return np.clip(2.0 - r / n, 0.0, 1.0)


def truncate_sigma(model: CoefficientModel, n: float) -> CoefficientModel:
    """Replace ``sigma`` by ``sigma * c(|x|) * c(|y|)`` with ``c(r) = clip(2 - r/n, 0, 1)``.

    This reproduces the five-case truncation: unchanged while both arguments lie
    in the ball of radius ``n``, linear ramps on ``(n, 2n]``, zero beyond ``2n``.
    """
    if n < 1:
        raise ValueError("truncation level must be >= 1")
    n = float(n)
    sigma = model.sigma

    def sigma_n(t, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        s = np.asarray(sigma(t, x, y), dtype=float)
        w = _cutoff(np.linalg.norm(x, axis=-1), n) * _cutoff(np.linalg.norm(y, axis=-1), n)
        return s * w[..., None, None]

    return model.with_sigma(sigma_n, name=f"{model.name}[n={n:g}]")


def apriori_bound(model: CoefficientModel, phi: InitialSegment, ctrl: Control) -> float:
    """Upper bound on the squared sup norm of the skeleton solution.

    ``(|phi(0)|^2 + 2 K4 T) * exp(4 K4 T + |ctrl|_{L2}^2 / eta)`` with the model's
    declared ``K4`` and ``eta``; may be ``inf`` when the exponent overflows.
    """
    K4, eta = model.declared.K4, model.declared.eta
    T = ctrl.grid.T
    phi0 = float(np.sum(np.square(phi.samples[-1])))
    expo = 4.0 * K4 * T + l2_norm_sq(ctrl) / eta
    try:
        return (phi0 + 2.0 * K4 * T) * math.exp(expo)
    except OverflowError:
        return math.inf


def _node_midpoints(a):
    return 0.5 * (a[:-1] + a[1:])


def _solve_picard(model, phi, ctrl, grid, cfg):
    n = cfg.truncation_level
    if n is None:
        n = max(1.0, 2.0 * math.sqrt(apriori_bound(model, phi, ctrl)))
    tmodel = truncate_sigma(model, n) if math.isfinite(n) else model
    nh, N = grid.n_history, grid.n_steps
    u = np.asarray(ctrl.values)
    node_t = grid.times
    values = _initial_array(phi, grid)

    def forcing_for(zeta):
        # sigma_n along the frozen path at left/mid/right stage times of every step
        x_nodes = zeta[nh:]
        y_nodes = zeta[: N + 1]
        s_nodes = tmodel.diffusion(node_t[nh:], x_nodes, y_nodes)
        s_mid = tmodel.diffusion(_node_midpoints(node_t[nh:]), _node_midpoints(x_nodes),
                                 _node_midpoints(y_nodes))
        f = np.empty((N, 3, model.d))
        f[:, 0] = np.einsum("kij,kj->ki", s_nodes[:-1], u)
        f[:, 1] = np.einsum("kij,kj->ki", s_mid, u)
        f[:, 2] = np.einsum("kij,kj->ki", s_nodes[1:], u)
        return f

    start, window = 0, N
    while start < N:
        end = min(start + window, N)
        zeta = values.copy()
        zeta[nh + start + 1: nh + end + 1] = values[nh + start]
        prev, growth, restart, converged = None, 0, False, False
        for sweep in range(cfg.max_sweeps):
            new = values.copy()
            rk4_march(model, grid, new, u, start, end, forcing=forcing_for(zeta))
            upd = float(np.max(np.abs(new[nh + start: nh + end + 1] - zeta[nh + start: nh + end + 1])))
            zeta = new
            if upd <= cfg.tol * (1.0 + float(np.max(np.abs(new[nh + start: nh + end + 1])))):
                converged = True
                break
            if prev is not None and prev > 0:
                factor = upd / prev
                if factor >= cfg.contraction_target and end - start > 1:
                    window = max(1, math.ceil((end - start) / 2))
                    log.debug("picard: contraction %.3g on %d steps, halving window", factor, end - start)
                    restart = True
                    break
                growth = growth + 1 if factor > 1 else 0
                if growth >= 3:
                    raise PicardDivergenceError(
                        f"Picard update grew for 3 consecutive sweeps on steps [{start}, {end})")
            prev = upd
        if restart:
            continue
        if not converged:
            raise PicardDivergenceError(
                f"Picard iteration did not converge in {cfg.max_sweeps} sweeps on steps [{start}, {end})")
        values = zeta
        start = end
    peak = float(np.max(np.linalg.norm(values, axis=-1)))
    if peak > n:
        raise TruncationActiveError(
            f"solution reaches |z| = {peak:.4g} above truncation level n = {n:.4g}; increase n")
    return values
