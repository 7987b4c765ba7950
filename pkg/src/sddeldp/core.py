"""Grids, paths, controls, coefficient models, events and the assumption checker.

Everything here is immutable after construction.  Arrays handed to the
constructors are copied and flagged read-only so that instances can be shared
between workers without defensive copying.

Array conventions used throughout the package:

* a state is an array of shape ``(..., d)``; a diffusion value has shape
  ``(..., d, m)``; leading axes are batch axes (samples, stages, time nodes);
* a path stores all nodes of ``[-tau, T]``: index ``j`` is time ``(j - n_history) * h``,
  so the delayed partner of node ``j`` is node ``j - n_history``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "SddeError", "GridAlignmentError", "ModelEvaluationError", "BlowUpError",
    "TimeGrid", "make_grid", "InitialSegment", "Trajectory", "Control",
    "Declared", "CoefficientModel", "EventSpec", "ConditionRecord",
    "AssumptionReport", "op_G", "l2_norm_sq", "eval_path", "check_assumptions",
    "write_path_csv", "read_path_csv", "write_control_csv", "read_control_csv",
]


class SddeError(Exception):
    """Base class for numerical failures raised by this package."""


class GridAlignmentError(ValueError):
    pass


class ModelEvaluationError(SddeError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class BlowUpError(SddeError):
    """A state became non-finite or exceeded the blow-up threshold."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class TimeGrid:
    T: float
    h: float
    tau: float
    n_steps: int
    n_history: int

    @property
    def n_nodes(self) -> int:
        return self.n_history + self.n_steps + 1

    @property
    def times(self) -> np.ndarray:
        """Node times on ``[-tau, T]``."""
        return (np.arange(self.n_nodes) - self.n_history) * self.h

    @property
    def step_times(self) -> np.ndarray:
        """Left endpoints ``t_0 .. t_{n-1}`` of the steps on ``[0, T]``."""
        return np.arange(self.n_steps) * self.h

    def same_as(self, other: "TimeGrid") -> bool:
        return (self.n_steps == other.n_steps and self.n_history == other.n_history
                and math.isclose(self.h, other.h, rel_tol=1e-12))


def _integral_ratio(num, h, name):
    ratio = num / h
    k = round(ratio)
    if k < 1 or abs(ratio - k) > 1e-9 / h:
        raise GridAlignmentError(
            f"{name}/h = {num!r}/{h!r} = {ratio:.12g} is not an integer; "
            f"choose h so that {name} is a whole number of steps")
    return int(k)


def make_grid(T: float, h: float, tau: float) -> TimeGrid:
    """Build a uniform grid on ``[-tau, T]`` whose nodes hit ``0``, ``T`` and ``t - tau``.

    Raises GridAlignmentError when ``tau`` or ``T`` is not a whole number of steps.
    """
    T, h, tau = float(T), float(h), float(tau)
    for name, v in (("T", T), ("h", h), ("tau", tau)):
        if not (v > 0 and math.isfinite(v)):
            raise GridAlignmentError(f"{name} must be positive and finite, got {v!r}")
    n_history = _integral_ratio(tau, h, "tau")
    n_steps = _integral_ratio(T, h, "T")
    return TimeGrid(T=T, h=h, tau=tau, n_steps=n_steps, n_history=n_history)


# ---------------------------------------------------------------------------
# paths and controls


@dataclass(frozen=True)
class InitialSegment:
    """Initial function sampled at the history nodes of a grid, linearly interpolated."""

    grid: TimeGrid
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != self.grid.n_history + 1:
            raise ValueError(
                f"initial segment needs {self.grid.n_history + 1} samples, got {s.shape[0]}")
        object.__setattr__(self, "samples", _frozen(s))

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "InitialSegment":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(v, (grid.n_history + 1, 1)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[float], Sequence[float]]) -> "InitialSegment":
        ts = grid.times[: grid.n_history + 1]
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in ts], dtype=float))

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.samples, axis=-1)))


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    values: np.ndarray
    origin: str = "skeleton"

    ORIGINS = ("skeleton", "sdde", "controlled")

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_nodes:
            raise ValueError(f"trajectory needs {self.grid.n_nodes} nodes, got {v.shape[0]}")
        if self.origin not in self.ORIGINS:
            raise ValueError(f"unknown trajectory origin {self.origin!r}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def history(self) -> np.ndarray:
        return self.values[: self.grid.n_history + 1]

    @property
    def forward(self) -> np.ndarray:
        """Node values on ``[0, T]``."""
        return self.values[self.grid.n_history:]

    def initial_segment(self) -> InitialSegment:
        return InitialSegment(self.grid, self.history)

    def __call__(self, t: float) -> np.ndarray:
        return eval_path(self, t)

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=-1)))


@dataclass(frozen=True)
class Control:
    """Piecewise-constant control: ``values[k]`` acts on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_steps:
            raise ValueError(f"control needs {self.grid.n_steps} steps, got {v.shape[0]}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int = 1) -> "Control":
        return cls(grid, np.zeros((grid.n_steps, m)))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "Control":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(v, (grid.n_steps, 1)))

    def l2_norm_sq(self) -> float:
        return l2_norm_sq(self)

    def is_zero(self) -> bool:
        return not np.any(self.values)


def l2_norm_sq(ctrl: Control) -> float:
    """Squared L2 norm ``h * sum_k |phi_k|^2`` (not halved)."""
    return float(ctrl.grid.h * math.fsum(np.square(ctrl.values).ravel()))


def op_G(ctrl: Control) -> np.ndarray:
    """Running integral of the control at the nodes of ``[0, T]``.

    Returns an ``(n_steps + 1, m)`` array with a zero first row.
    """
    out = np.zeros((ctrl.grid.n_steps + 1, ctrl.m))
    np.cumsum(ctrl.values * ctrl.grid.h, axis=0, out=out[1:])
    return out


def eval_path(traj: Trajectory, t: float) -> np.ndarray:
    """Linear interpolation of a trajectory; exact at nodes."""
    g = traj.grid
    s = (float(t) + g.tau) / g.h
    last = g.n_nodes - 1
    if not (-1e-9 <= s <= last + 1e-9):
        raise ValueError(f"t={t!r} outside [{-g.tau!r}, {g.T!r}]")
    j = round(s)
    if abs(s - j) <= 1e-9:
        return traj.values[min(max(j, 0), last)].copy()
    j = int(math.floor(s))
    w = s - j
    return (1.0 - w) * traj.values[j] + w * traj.values[j + 1]


# ---------------------------------------------------------------------------
# CSV serialisation


def _write_rows(dest, times, values):
    """Write ``t,v0,..`` rows to a path or an open text handle."""
    values = np.asarray(values)
    header = ["t"] + [f"v{i}" for i in range(values.shape[1])]
    fh = dest if hasattr(dest, "write") else open(dest, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for t, row in zip(times, values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    finally:
        if fh is not dest:
            fh.close()


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "t":
        raise ValueError(f"{path}: expected header 't,v0,...'")
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"{path}: need at least two data rows")
    return data[:, 0], data[:, 1:]


def write_path_csv(traj: Trajectory, path) -> None:
    _write_rows(path, traj.times, traj.values)


def write_control_csv(ctrl: Control, path) -> None:
    _write_rows(path, ctrl.grid.step_times, ctrl.values)


def read_path_csv(path, origin: str = "skeleton") -> Trajectory:
    """Read a trajectory CSV; the grid is recovered from the time column."""
    t, v = _read_rows(path)
    h = float(np.mean(np.diff(t)))
    grid = make_grid(T=t[-1], h=h, tau=-t[0])
    if grid.n_nodes != len(t):
        raise GridAlignmentError(f"{path}: time column is not a uniform grid on [-tau, T]")
    return Trajectory(grid, v, origin)


def read_control_csv(path, grid: TimeGrid) -> Control:
    t, v = _read_rows(path)
    if len(t) != grid.n_steps or not np.allclose(t, grid.step_times, atol=1e-9 * max(1.0, grid.T)):
        raise GridAlignmentError(
            f"{path}: control has {len(t)} steps, simulation grid has {grid.n_steps}")
    return Control(grid, v)


# ---------------------------------------------------------------------------
# coefficient models


@dataclass(frozen=True)
class Declared:
    """Constants a model claims to satisfy in the monotonicity / growth conditions."""

    q: float
    eta: float
    K1: float = 0.0
    K2: float = 0.0
    K3: float = 0.0
    K4: float = 0.0
    K5: float = 0.0
    K6: float = 0.0

    def __post_init__(self):
        for name in ("q", "eta", "K1", "K2", "K3", "K4", "K5", "K6"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"declared.{name} must be finite, got {v!r}")
        if self.q < 1:
            raise ValueError(f"declared.q must be >= 1, got {self.q!r}")
        if self.eta <= 1:
            raise ValueError(f"declared.eta must be > 1, got {self.eta!r}")
        for k in ("K1", "K2", "K3", "K4", "K5", "K6"):
            if getattr(self, k) < 0:
                raise ValueError(f"declared.{k} must be >= 0")

    def gate(self) -> bool:
        return self.eta > 2 * self.q - 1

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("q", "eta", "K1", "K2", "K3", "K4", "K5", "K6")}


@dataclass(frozen=True)
class CoefficientModel:
    """Drift ``b(t, x, y)`` and diffusion ``sigma(t, x, y)`` of the delay equation.

    Both callables must be pure and accept batched inputs: ``t`` is a scalar or
    an array broadcastable against the batch shape, ``x`` and ``y`` have shape
    ``(..., d)``.  ``b`` returns ``(..., d)`` and ``sigma`` returns ``(..., d, m)``.
    """

    d: int
    m: int
    tau: float
    b: Callable = field(repr=False)
    sigma: Callable = field(repr=False)
    declared: Declared
    name: str = "custom"

    def drift(self, t, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.b(t, x, np.asarray(y, dtype=float)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.d,))

    def diffusion(self, t, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.sigma(t, x, np.asarray(y, dtype=float)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.d, self.m))

    def with_tau(self, tau: float) -> "CoefficientModel":
        return replace(self, tau=float(tau))

    def with_sigma(self, sigma: Callable, name: Optional[str] = None) -> "CoefficientModel":
        return replace(self, sigma=sigma, name=name or self.name)

    def with_declared(self, **kw) -> "CoefficientModel":
        return replace(self, declared=replace(self.declared, **kw))


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class EventSpec:
    """A closed set of paths described by the end point or by a tube around a reference.

    * ``endpoint_halfspace``: ``direction * (X_i(T) - threshold) >= 0``;
    * ``endpoint_ball_exterior``: ``|X(T) - center| >= radius``;
    * ``tube_exit``: ``max_{t in [0, T]} |X(t) - ref(t)| >= delta`` over the grid nodes.
    """

    kind: str
    index: int = 0
    threshold: float = 0.0
    direction: int = 1
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    reference: Optional[Trajectory] = None
    delta: float = 0.0

    KINDS = ("endpoint_halfspace", "endpoint_ball_exterior", "tube_exit")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        if self.center is not None:
            object.__setattr__(self, "center", _frozen(np.atleast_1d(self.center)))

    @classmethod
    def halfspace(cls, index: int, threshold: float, direction: int = 1) -> "EventSpec":
        return cls("endpoint_halfspace", index=int(index), threshold=float(threshold),
                   direction=int(direction))

    @classmethod
    def ball_exterior(cls, center, radius: float) -> "EventSpec":
        return cls("endpoint_ball_exterior", center=np.atleast_1d(np.asarray(center, float)),
                   radius=float(radius))

    @classmethod
    def tube_exit(cls, reference: Trajectory, delta: float) -> "EventSpec":
        return cls("tube_exit", reference=reference, delta=float(delta))

    @property
    def is_endpoint(self) -> bool:
        return self.kind != "tube_exit"

    def is_certain(self) -> bool:
        """True when every path belongs to the event."""
        if self.kind == "endpoint_halfspace":
            return self.direction * self.threshold == -math.inf
        if self.kind == "endpoint_ball_exterior":
            return self.radius <= 0
        return self.delta <= 0

    def endpoint_gap(self, x_end: np.ndarray) -> np.ndarray:
        """Signed margin of the end point; nonnegative inside the event."""
        x_end = np.asarray(x_end, dtype=float)
        if self.kind == "endpoint_halfspace":
            return self.direction * (x_end[..., self.index] - self.threshold)
        if self.kind == "endpoint_ball_exterior":
            return np.linalg.norm(x_end - self.center, axis=-1) - self.radius
        raise ValueError("tube_exit has no end-point functional")

    def contains(self, paths, grid: Optional[TimeGrid] = None) -> np.ndarray:
        """Membership of one path (``Trajectory`` or ``(N, d)``) or a batch ``(B, N, d)``."""
        if isinstance(paths, Trajectory):
            grid = paths.grid
            paths = paths.values
        values = np.asarray(paths, dtype=float)
        if self.is_certain():
            return np.ones(values.shape[:-2], dtype=bool)
        if self.is_endpoint:
            return self.endpoint_gap(values[..., -1, :]) >= 0
        ref = self.reference
        if ref.values.shape[0] != values.shape[-2] or (grid is not None and not ref.grid.same_as(grid)):
            raise ValueError("tube_exit reference must share the simulation grid")
        n0 = ref.grid.n_history
        dev = np.linalg.norm(values[..., n0:, :] - ref.values[n0:], axis=-1)
        return dev.max(axis=-1) >= self.delta

    def describe(self) -> str:
        if self.kind == "endpoint_halfspace":
            op = ">=" if self.direction > 0 else "<="
            return f"X_{self.index}(T) {op} {self.threshold:g}"
        if self.kind == "endpoint_ball_exterior":
            return f"|X(T) - {list(self.center)}| >= {self.radius:g}"
        return f"sup|X - ref| >= {self.delta:g}"


# ---------------------------------------------------------------------------
# assumption checker


@dataclass(frozen=True)
class ConditionRecord:
    condition: str
    worst_ratio: float
    declared: float
    passed: bool
    worst_point: Optional[dict] = None

    def as_dict(self) -> dict:
        return {"condition": self.condition, "worst_ratio": self.worst_ratio,
                "declared": self.declared, "pass": self.passed, "worst_point": self.worst_point}


@dataclass(frozen=True)
class AssumptionReport:
    conditions: tuple
    largest_feasible_eta: float
    theorem_gate_pass: bool
    q: float
    n_points: int
    radius: float
    seed: int

    def __getitem__(self, condition: str) -> ConditionRecord:
        for rec in self.conditions:
            if rec.condition == condition:
                return rec
        raise KeyError(condition)

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.conditions)

    def as_dict(self) -> dict:
        return {
            "conditions": [r.as_dict() for r in self.conditions],
            "all_pass": self.all_pass,
            "largest_feasible_eta": self.largest_feasible_eta,
            "theorem_gate_pass": self.theorem_gate_pass,
            "q": self.q,
            "sampler": {"n_points": self.n_points, "radius": self.radius, "seed": self.seed},
        }


# Names of the checked conditions, in report order.
CONDITIONS = ("origin_bound", "monotone", "drift_growth", "coercivity",
              "diffusion_growth", "superlinear_bound")
_DECLARED_FOR = dict(zip(CONDITIONS, ("K1", "K2", "K3", "K4", "K5", "K6")))
ETA_BRACKET = (1.0, 64.0)
ETA_TOL = 1e-3
RATIO_SLACK = 1e-9


def _safe_ratio(num, den):
    out = np.full(num.shape, -np.inf)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def check_assumptions(model: CoefficientModel, n_points: int = 100_000, radius: float = 5.0,
                      seed: int = 0, T: float = 1.0) -> AssumptionReport:
    """Sample the monotonicity and growth conditions on a box and compare with the declared constants.

    Points ``(t, x1, x2, y1, y2)`` are drawn uniformly from ``[0, T] x [-R, R]^{4d}``
    as one block, so a run with more points extends the sample of a smaller run.
    A condition passes when the sampled worst ratio does not exceed the declared
    constant (relative slack 1e-9).  ``largest_feasible_eta`` is the largest eta in
    ``[1, 64]`` for which the monotone condition holds on the sample; it equals the
    bracket floor 1.0 when no eta in the bracket is feasible.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    d, q = model.d, model.declared.q
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    u = rng.random((int(n_points), 1 + 4 * d))
    t = u[:, 0] * T
    x1, x2, y1, y2 = (radius * (2 * u[:, 1 + i * d: 1 + (i + 1) * d] - 1) for i in range(4))
    zeros = np.zeros_like(x1)

    def evaluate(x, y):
        b = model.drift(t, x, y)
        s = model.diffusion(t, x, y)
        bad = ~(np.isfinite(b).all(axis=-1) & np.isfinite(s).all(axis=(-2, -1)))
        if bad.any():
            i = int(np.argmax(bad))
            point = {"t": float(t[i]), "x": x[i].tolist(), "y": y[i].tolist()}
            raise ModelEvaluationError(f"non-finite coefficient value at {point}", point)
        return b, s

    b1, s1 = evaluate(x1, y1)
    b2, s2 = evaluate(x2, y2)
    b0, s0 = evaluate(zeros, zeros)

    def fro(a):
        return np.sqrt(np.sum(np.square(a), axis=(-2, -1)))

    def nrm(a):
        return np.linalg.norm(a, axis=-1)

    dx, dy = x1 - x2, y1 - y2
    dx2 = np.sum(dx * dx, axis=-1)
    dist2 = dx2 + np.sum(dy * dy, axis=-1)
    inner = np.sum(dx * (b1 - b2), axis=-1)
    dsig2 = np.sum(np.square(s1 - s2), axis=(-2, -1))
    growth = (1 + nrm(x1) ** (q - 1) + nrm(x2) ** (q - 1) + nrm(y1) ** (q - 1)
              + nrm(y2) ** (q - 1)) * (np.sqrt(dx2) + nrm(dy))
    eta = model.declared.eta

    mono_a = _safe_ratio(inner, dist2)
    mono_b = _safe_ratio(dsig2, dist2)
    mono_b[~np.isfinite(mono_a)] = 0.0
    ratios = {
        "origin_bound": nrm(b0) + fro(s0),
        "monotone": mono_a + eta * mono_b,
        "drift_growth": _safe_ratio(nrm(b1 - b2), growth),
        "coercivity": (np.sum(x1 * b1, axis=-1) + 0.5 * eta * fro(s1) ** 2)
        / (1 + nrm(x1) ** 2 + nrm(y1) ** 2),
        "diffusion_growth": _safe_ratio(np.sqrt(dsig2), growth),
        "superlinear_bound": (nrm(b1) + fro(s1)) / (1 + nrm(x1) ** q + nrm(y1) ** q),
    }
    records = []
    for name in CONDITIONS:
        r = ratios[name]
        i = int(np.argmax(r))
        worst = float(max(r[i], 0.0)) if np.isfinite(r[i]) else 0.0
        declared = float(getattr(model.declared, _DECLARED_FOR[name]))
        point = {"t": float(t[i]), "x1": x1[i].tolist(), "x2": x2[i].tolist(),
                 "y1": y1[i].tolist(), "y2": y2[i].tolist()}
        records.append(ConditionRecord(name, worst, declared,
                                       worst <= declared * (1 + RATIO_SLACK) + 1e-300, point))

    K2 = model.declared.K2

    def feasible(e):
        return float(np.max(mono_a + e * mono_b)) <= K2 * (1 + RATIO_SLACK) + 1e-300

    lo, hi = ETA_BRACKET
    if feasible(hi):
        best = hi
    elif not feasible(lo):
        best = lo
    else:
        while hi - lo > ETA_TOL:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        best = lo
    return AssumptionReport(conditions=tuple(records), largest_feasible_eta=float(best),
                            theorem_gate_pass=bool(best > 2 * q - 1), q=float(q),
                            n_points=int(n_points), radius=float(radius), seed=int(seed))
