"""Rate function evaluation and minimisation over end-point events.

The rate of a path is the cost ``1/2 int |phi|^2`` of the cheapest control
that reproduces it through the skeleton dynamics.  On the grid the constraint
separates over steps, so the cheapest control is the least-norm solution
``phi_k = pinv(sigma_k) r_k`` of each step's residual velocity ``r_k``.

Minimisation over an event uses a quadratic penalty on the end point of the
skeleton solution and a quasi-Newton inner solver.  Controls are optimised in
the scaled variables ``sqrt(h) * phi``, in which the Euclidean gradient norm
equals the L2 norm of the functional gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .core import (CoefficientModel, Control, EventSpec, InitialSegment, TimeGrid, Trajectory,
                   l2_norm_sq)
from .skeleton import _check_inputs, solve_skeleton, solve_skeleton_batch

__all__ = ["RateCertificate", "evaluate_rate", "MinimizeConfig", "RateMinResult", "minimize_rate",
           "fd_gradient", "adjoint_gradient", "PINV_RCOND"]

log = logging.getLogger(__name__)

PINV_RCOND = 1e-10


@dataclass(frozen=True)
class RateCertificate:
    value: float
    control: Control
    residuals: np.ndarray
    feasible: bool
    tolerance: float

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals)) if self.residuals.size else 0.0

    def as_dict(self) -> dict:
        return {"value": self.value if math.isfinite(self.value) else "inf",
                "feasible": self.feasible, "max_residual": self.max_residual,
                "tolerance": self.tolerance}


def evaluate_rate(model: CoefficientModel, f: Trajectory, grid: Optional[TimeGrid] = None,
                  tol: Optional[float] = None, phi: Optional[InitialSegment] = None) -> RateCertificate:
    """Rate of the sampled path ``f`` with its least-norm control.

    The velocity is the forward difference on each step and the drift is taken
    at the left node.  The path is infeasible (value ``inf``) when some step
    residual ``|r_k - sigma_k phi_k|`` exceeds ``tol`` (default ``10 h``).
    """
    grid = f.grid if grid is None else grid
    if not f.grid.same_as(grid):
        raise ValueError("path is not sampled on the given grid")
    if not math.isclose(model.tau, grid.tau, rel_tol=1e-12) or f.d != model.d:
        raise ValueError("path does not match the model's delay or dimension")
    vals = np.asarray(f.values)
    if not np.all(np.isfinite(vals)):
        raise ValueError("path has non-finite values")
    if phi is not None and np.max(np.abs(f.history - phi.samples)) > 1e-9:
        raise ValueError("path does not start from the given initial segment")
    h, nh, N = grid.h, grid.n_history, grid.n_steps
    tol = 10.0 * h if tol is None else float(tol)
    t = grid.step_times
    x, y = vals[nh:nh + N], vals[:N]
    r = (vals[nh + 1:] - x) / h - model.drift(t, x, y)
    S = model.diffusion(t, x, y)
    phi_star = np.einsum("kij,kj->ki", np.linalg.pinv(S, rcond=PINV_RCOND), r)
    residuals = np.linalg.norm(r - np.einsum("kij,kj->ki", S, phi_star), axis=-1)
    ctrl = Control(grid, phi_star)
    feasible = bool(np.all(residuals <= tol))
    value = 0.5 * l2_norm_sq(ctrl) if feasible else math.inf
    return RateCertificate(value, ctrl, residuals, feasible, tol)


# ---------------------------------------------------------------------------
# gradients


def fd_gradient(objective: Callable, ctrl: Control, step: Optional[float] = None,
                vectorized: bool = False) -> np.ndarray:
    """Central-difference gradient of ``objective`` with respect to every control value.

    The default step for coordinate ``k`` is ``1e-6 * (1 + |phi_k|)``.  With
    ``vectorized=True`` the objective receives the whole ``(B, n_steps, m)``
    stack of perturbed controls at once and must return ``B`` values;
    otherwise it is called with one :class:`Control` at a time.
    """
    base = np.asarray(ctrl.values, dtype=float)
    flat = base.ravel()
    steps = 1e-6 * (1.0 + np.abs(flat)) if step is None else np.full(flat.shape, float(step))
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    n = flat.size
    stack = np.repeat(flat[None], 2 * n, axis=0)
    idx = np.arange(n)
    stack[2 * idx, idx] += steps
    stack[2 * idx + 1, idx] -= steps
    stack = stack.reshape((2 * n,) + base.shape)
    if vectorized:
        vals = np.asarray(objective(stack), dtype=float)
    else:
        vals = np.array([objective(Control(ctrl.grid, s)) for s in stack], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("objective is non-finite at a perturbed control")
    return ((vals[0::2] - vals[1::2]) / (2.0 * steps)).reshape(base.shape)


def _stage_jacobians(model, grid, X, Y, u):
    """Jacobians of ``b + sigma u`` in ``x`` and ``y`` at every RK4 stage, by central differences."""
    h, N, d = grid.h, grid.n_steps, model.d
    t = (np.arange(N)[:, None] + np.array([0.0, 0.5, 0.5, 1.0])[None]) * h
    U = np.broadcast_to(u[:, None, :], (N, 4, u.shape[-1]))

    def F(x, y):
        return model.drift(t, x, y) + np.einsum("...ij,...j->...i", model.diffusion(t, x, y), U)

    Jx = np.empty((N, 4, d, d))
    Jy = np.empty((N, 4, d, d))
    for j in range(d):
        for arr, J, first in ((X, Jx, True), (Y, Jy, False)):
            dlt = 1e-6 * (1.0 + np.abs(arr[..., j]))
            e = np.zeros_like(arr)
            e[..., j] = dlt
            if first:
                diff = F(X + e, Y) - F(X - e, Y)
            else:
                diff = F(X, Y + e) - F(X, Y - e)
            J[..., :, j] = diff / (2.0 * dlt[..., None])
    S = model.diffusion(t, X, Y)
    return Jx, Jy, S


def adjoint_gradient(model: CoefficientModel, phi: InitialSegment, ctrl: np.ndarray, grid: TimeGrid,
                     terminal: Callable) -> tuple:
    """Gradient of ``terminal(z(T))`` in the control values by reverse sweep through RK4.

    ``terminal`` returns ``(value, d value / d z(T))``.  The reverse sweep is the
    exact transpose of :func:`rk4_march` (stage Jacobians of the coefficients
    are taken by central differences), delayed arguments included.
    Returns ``(terminal value, gradient (n_steps, m), trajectory values)``.
    """
    ctrl = np.asarray(ctrl, dtype=float)
    stages: dict = {}
    vals = solve_skeleton_batch(model, phi, ctrl, grid, stages=stages)
    X, Y = stages["X"], stages["Y"]
    Jx, Jy, S = _stage_jacobians(model, grid, X, Y, ctrl)
    h, nh, N = grid.h, grid.n_history, grid.n_steps
    value, gT = terminal(vals[-1])
    lam = np.zeros_like(vals)
    lam[-1] = gT
    grad = np.zeros_like(ctrl)
    JxT = np.swapaxes(Jx, -1, -2)
    JyT = np.swapaxes(Jy, -1, -2)
    ST = np.swapaxes(S, -1, -2)
    for k in range(N - 1, -1, -1):
        j = nh + k
        a = lam[j + 1]
        lam[j] += a
        kb = [h / 6.0 * a, h / 3.0 * a, h / 3.0 * a, h / 6.0 * a]
        for s, (x_back, y_split) in zip((3, 2, 1, 0), ((h, (0.0, 1.0)), (0.5 * h, (0.5, 0.5)),
                                                       (0.5 * h, (0.5, 0.5)), (0.0, (1.0, 0.0)))):
            xb = JxT[k, s] @ kb[s]
            yb = JyT[k, s] @ kb[s]
            grad[k] += ST[k, s] @ kb[s]
            lam[j] += xb
            if s > 0:
                kb[s - 1] = kb[s - 1] + x_back * xb
            lam[k] += y_split[0] * yb
            lam[k + 1] += y_split[1] * yb
    return value, grad, vals


# ---------------------------------------------------------------------------
# minimisation


@dataclass(frozen=True)
class MinimizeConfig:
    gradient: str = "adjoint"
    mu0: float = 10.0
    mu_factor: float = 10.0
    rounds: int = 6
    gtol: float = 1e-6
    maxiter: int = 500
    max_violation: float = 1e-4

    def __post_init__(self):
        if self.gradient not in ("finite_difference", "adjoint"):
            raise ValueError(f"unknown gradient {self.gradient!r}")
        if not (self.mu0 > 0 and self.mu_factor > 1 and self.rounds >= 1):
            raise ValueError("penalty weights must be positive and increasing")


@dataclass(frozen=True)
class RateMinResult:
    control: Control
    value: float
    trajectory: Trajectory
    violation: float
    converged: bool
    message: str
    history: tuple = field(default=())

    def as_dict(self) -> dict:
        return {"value": self.value, "violation": self.violation, "converged": self.converged,
                "message": self.message,
                "rounds": [dict(zip(("mu", "objective", "value", "violation", "grad_norm"), r))
                           for r in self.history]}


def minimize_rate(model: CoefficientModel, phi: InitialSegment, event: EventSpec, grid: TimeGrid,
                  cfg: MinimizeConfig = MinimizeConfig()) -> RateMinResult:
    """Cheapest control steering the skeleton end point into ``event``.

    Minimises ``1/2 |phi|^2 + mu * v(z(T))^2`` where ``v`` is the distance of the
    end point to the event, for ``mu = mu0, mu0*10, ...`` over ``cfg.rounds``
    rounds with warm starts.  The result carries ``converged=False`` and a
    message instead of raising when the optimiser stagnates or the final
    violation exceeds ``cfg.max_violation``.
    """
    if not event.is_endpoint:
        raise ValueError("only end-point events can be minimised over")
    _check_inputs(model, phi, None, grid)
    h, N, m = grid.h, grid.n_steps, model.m
    rh = math.sqrt(h)
    shape = (N, m)

    def violation(zT):
        return np.maximum(0.0, -event.endpoint_gap(zT))

    def terminal_factory(mu):
        def terminal(zT):
            zT = np.asarray(zT, dtype=float)
            v = float(violation(zT))
            if v == 0.0:
                return 0.0, np.zeros_like(zT)
            if event.kind == "endpoint_halfspace":
                dgap = np.zeros_like(zT)
                dgap[event.index] = event.direction
            else:
                diff = zT - event.center
                dgap = diff / max(float(np.linalg.norm(diff)), 1e-300)
            return mu * v * v, -2.0 * mu * v * dgap
        return terminal

    def make_fun(mu):
        terminal = terminal_factory(mu)

        def batch_obj(stack):
            zT = solve_skeleton_batch(model, phi, stack, grid)[:, -1]
            return 0.5 * h * np.sum(stack * stack, axis=(-2, -1)) + mu * violation(zT) ** 2

        def fun(v):
            ctrl = v.reshape(shape) / rh
            if cfg.gradient == "adjoint":
                pen, g_pen, _ = adjoint_gradient(model, phi, ctrl, grid, terminal)
                g = h * ctrl + g_pen
                J = 0.5 * float(np.dot(v, v)) + pen
            else:
                J = float(batch_obj(ctrl[None])[0])
                g = fd_gradient(batch_obj, Control(grid, ctrl), vectorized=True)
            return J, (g / rh).ravel()
        return fun

    x = np.zeros(N * m)
    # a centred ball event has no descent direction at the zero control
    if event.kind == "endpoint_ball_exterior":
        z0 = solve_skeleton(model, phi, None, grid).values[-1]
        if np.linalg.norm(z0 - event.center) < 1e-12 and violation(z0) > 0:
            x[:] = 1e-3 * rh
    mu = cfg.mu0
    history = []
    stalled = False
    message = "converged"
    prev_obj = None
    res = None
    for rnd in range(cfg.rounds):
        fun = make_fun(mu)
        start_obj = fun(x)[0]
        res = minimize(fun, x, jac=True, method="BFGS",
                       options={"gtol": cfg.gtol, "maxiter": cfg.maxiter})
        x = res.x
        ctrl = x.reshape(shape) / rh
        zT = solve_skeleton_batch(model, phi, ctrl[None], grid)[0, -1]
        viol = float(violation(zT))
        value = 0.5 * float(np.dot(x, x))
        gnorm = float(np.linalg.norm(res.jac))
        history.append((mu, float(res.fun), value, viol, gnorm))
        log.debug("round %d mu=%g J=%.8g value=%.8g violation=%.3g |g|=%.2g %s",
                  rnd, mu, res.fun, value, viol, gnorm, res.message)
        if res.fun >= start_obj and viol > cfg.max_violation and rnd > 0:
            stalled = True
        prev_obj = res.fun
        mu *= cfg.mu_factor
    ctrl = Control(grid, x.reshape(shape) / rh)
    traj = solve_skeleton(model, phi, ctrl, grid)
    viol = float(violation(traj.values[-1]))
    converged = viol <= cfg.max_violation and not stalled
    if stalled:
        message = ("penalty round made no progress; returning best iterate "
                   f"(violation {viol:.3g}, objective {prev_obj:.6g})")
    elif viol > cfg.max_violation:
        message = (f"end-point violation {viol:.3g} exceeds {cfg.max_violation:g} after "
                   f"{cfg.rounds} rounds; the event may be unreachable through sigma")
    if not converged:
        log.warning("minimize_rate: %s", message)
    return RateMinResult(ctrl, 0.5 * l2_norm_sq(ctrl), traj, viol, converged, message,
                         tuple(history))
