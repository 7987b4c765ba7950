"""Small-noise SDDE integrators, the controlled equation and the moment sweep.

Randomness comes from counter-based streams: a stream is the Philox-4x64 key
``(seed, stream_id)`` and its normals are drawn in step order, so a sample's
Brownian path depends only on its own key.  Batches are simulated with one
stream per sample, which makes every estimate independent of chunking and of
the number of worker threads.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BlowUpError, CoefficientModel, Control, InitialSegment, TimeGrid, Trajectory

__all__ = ["SCHEMES", "GENERATOR_ID", "BLOWUP_THRESHOLD", "RngStream", "derive_stream",
           "ControlledRun", "simulate", "simulate_controlled", "simulate_batch",
           "MomentRow", "moment_sweep", "HypothesisWarning", "default_threads"]

SCHEMES = ("euler", "tamed_euler")
GENERATOR_ID = "numpy-philox4x64-ziggurat"
BLOWUP_THRESHOLD = 1e12
_U64 = 1 << 64


class HypothesisWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < _U64):
                raise ValueError(f"{name} must fit in 64 unsigned bits, got {v!r}")

    @property
    def key(self) -> int:
        return (int(self.seed) << 64) | int(self.stream_id)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key))

    def normals(self, n_steps: int, m: int) -> np.ndarray:
        """The first ``n_steps * m`` standard normals of the stream, shape ``(n_steps, m)``."""
        return self.generator().standard_normal((n_steps, m))


def derive_stream(seed: int, sample_index: int) -> RngStream:
    """Stream owned by one Monte Carlo sample; injective in ``(seed, sample_index)``."""
    return RngStream(int(seed), int(sample_index))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("SDDELDP_NUM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ControlledRun:
    trajectory: Trajectory
    log_weight: float


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def _integrate(model: CoefficientModel, phi: InitialSegment, eps: float, grid: TimeGrid,
               scheme: str, z: np.ndarray, ctrl: Optional[np.ndarray], first_index: int = 0):
    """March a batch driven by standard normals ``z`` (``(B, n_steps, m)``).

    Returns node values ``(B, n_nodes, d)`` and log Girsanov weights ``(B,)``.
    The control enters as a shift of the driving noise, so the weight is the
    exact likelihood ratio of the discrete increments.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    h, nh, N = grid.h, grid.n_history, grid.n_steps
    B = z.shape[0]
    vals = np.empty((B, grid.n_nodes, model.d))
    vals[:, : nh + 1] = phi.samples
    dW = math.sqrt(h) * z
    rt_eps = math.sqrt(eps)
    tamed = scheme == "tamed_euler"
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            t = k * h
            x = vals[:, nh + k]
            y = vals[:, k]
            b = model.drift(t, x, y)
            s = model.diffusion(t, x, y)
            if tamed:
                b = b / (1.0 + h * np.linalg.norm(b, axis=-1))[:, None]
                s = s / (1.0 + h * np.sum(s * s, axis=(-2, -1)))[:, None, None]
            noise = dW[:, k]
            inc = b * h + rt_eps * np.einsum("bij,bj->bi", s, noise)
            if ctrl is not None:
                inc = inc + h * np.einsum("bij,j->bi", s, ctrl[k])
            nxt = x + inc
            bad = ~np.all(np.isfinite(nxt) & (np.abs(nxt) <= BLOWUP_THRESHOLD), axis=-1)
            if bad.any():
                i = int(np.argmax(bad))
                raise BlowUpError(
                    f"{scheme} blew up at step {k + 1} (t={(k + 1) * h:g}) on sample "
                    f"{first_index + i}: |X| = {float(np.max(np.abs(nxt[i]))):.3g}", step=k + 1)
            vals[:, nh + k + 1] = nxt
    if ctrl is None or not np.any(ctrl):
        logw = np.zeros(B)
    elif eps == 0:
        logw = np.full(B, np.nan)
    else:
        logw = (-np.einsum("bkj,kj->b", dW, ctrl) / rt_eps
                - h * float(np.sum(ctrl * ctrl)) / (2.0 * eps))
    return vals, logw


def _check(model, phi, grid, ctrl):
    if not math.isclose(model.tau, grid.tau, rel_tol=1e-12):
        raise ValueError(f"model tau={model.tau} differs from grid tau={grid.tau}")
    if phi.grid.n_history != grid.n_history or phi.d != model.d:
        raise ValueError("initial segment does not match the grid or the model dimension")
    if ctrl is not None and (ctrl.grid.n_steps != grid.n_steps or ctrl.m != model.m):
        raise ValueError("control is not on the simulation grid")


def simulate(model: CoefficientModel, phi: InitialSegment, eps: float, grid: TimeGrid,
             scheme: str = "tamed_euler", rng: RngStream = RngStream(0)) -> Trajectory:
    """One path of ``dX = b dt + sqrt(eps) sigma dW`` on the grid."""
    _check_scheme(scheme)
    _check(model, phi, grid, None)
    z = rng.normals(grid.n_steps, model.m)[None]
    vals, _ = _integrate(model, phi, float(eps), grid, scheme, z, None, rng.stream_id)
    return Trajectory(grid, vals[0], "sdde")


def simulate_controlled(model: CoefficientModel, phi: InitialSegment, eps: float, ctrl: Control,
                        grid: TimeGrid, scheme: str = "tamed_euler",
                        rng: RngStream = RngStream(0)) -> ControlledRun:
    """One path of ``dY = b dt + sigma u dt + sqrt(eps) sigma dW`` with its log Girsanov weight.

    The weight is ``-(1/sqrt(eps)) sum u_k . dW_k - (h/(2 eps)) sum |u_k|^2``;
    it is ``nan`` when ``eps == 0`` and the control is not identically zero.
    """
    _check_scheme(scheme)
    _check(model, phi, grid, ctrl)
    z = rng.normals(grid.n_steps, model.m)[None]
    u = None if ctrl.is_zero() else np.asarray(ctrl.values)
    vals, logw = _integrate(model, phi, float(eps), grid, scheme, z, u, rng.stream_id)
    return ControlledRun(Trajectory(grid, vals[0], "controlled"), float(logw[0]))


def simulate_batch(model: CoefficientModel, phi: InitialSegment, eps: float, grid: TimeGrid,
                   scheme: str, seed: int, n_samples: int, ctrl: Optional[Control] = None,
                   reducer: Optional[Callable] = None, chunk_size: int = 8192,
                   n_threads: Optional[int] = None, first_index: int = 0):
    """Simulate ``n_samples`` paths; sample ``i`` is driven by ``derive_stream(seed, first_index + i)``.

    ``reducer(values, log_weights)`` maps a chunk to per-sample arrays (default:
    keep everything).  Returns the per-sample outputs concatenated in sample
    order; the result does not depend on ``chunk_size`` or ``n_threads``.
    """
    _check_scheme(scheme)
    _check(model, phi, grid, ctrl)
    u = None if ctrl is None or ctrl.is_zero() else np.asarray(ctrl.values)
    n_threads = default_threads() if n_threads is None else n_threads
    reducer = reducer or (lambda v, w: (v, w))

    def run(lo):
        hi = min(lo + chunk_size, n_samples)
        z = np.empty((hi - lo, grid.n_steps, model.m))
        for i in range(lo, hi):
            z[i - lo] = derive_stream(seed, first_index + i).normals(grid.n_steps, model.m)
        vals, logw = _integrate(model, phi, float(eps), grid, scheme, z, u, first_index + lo)
        return reducer(vals, logw)

    starts = range(0, int(n_samples), chunk_size)
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p) for p in zip(*parts))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# moment sweep


@dataclass(frozen=True)
class MomentRow:
    eps: float
    p: float
    estimate: float
    stderr: float
    n: int
    in_hypothesis: bool


def moment_sweep(model: CoefficientModel, phi: InitialSegment, eps_list: Sequence[float], p: float,
                 n_samples: int, grid: TimeGrid, scheme: str = "tamed_euler", seed: int = 0,
                 ctrl: Optional[Control] = None) -> list:
    """Monte Carlo estimate of ``E[max_t |Y(t)|^p]`` for each noise level.

    The running maximum is taken over all nodes of ``[-tau, T]``.  Every noise
    level reuses the same sample streams.  A ``p`` outside ``[2, eta + 1)`` is
    still computed but flagged and reported through :class:`HypothesisWarning`.
    """
    eta = model.declared.eta
    ok = 2 <= p < eta + 1
    if not ok:
        warnings.warn(f"moment order p={p} outside [2, eta+1) = [2, {eta + 1:g})",
                      HypothesisWarning, stacklevel=2)
    rows = []
    for eps in eps_list:
        if not 0 < eps < 0.5:
            warnings.warn(f"eps={eps} outside (0, 1/2)", HypothesisWarning, stacklevel=2)
        sup_p = simulate_batch(
            model, phi, eps, grid, scheme, seed, n_samples, ctrl,
            reducer=lambda v, w: np.max(np.linalg.norm(v, axis=-1), axis=-1) ** p)
        mean = math.fsum(sup_p) / n_samples
        if n_samples > 1:
            var = math.fsum((sup_p - mean) ** 2) / (n_samples - 1)
            se = math.sqrt(var / n_samples)
        else:
            se = math.nan
        rows.append(MomentRow(float(eps), float(p), mean, se, int(n_samples), ok))
    return rows
