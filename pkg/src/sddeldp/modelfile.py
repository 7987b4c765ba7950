"""Model definition files (TOML) and initial-segment inputs.

Schema::

    d = 1                 # state dimension (default 1)
    m = 1                 # noise dimension (default 1)
    tau = 1.0             # delay, required
    builtin = "linear_ou" # or give expressions:
    # b = ["x[0] - x[0]^3 + y[0]"]          d strings
    # sigma = [["1"]]                       d rows of m strings

    [declared]            # all eight constants are required
    q = 1
    eta = 6
    K1 = 1
    K2 = 1
    K3 = 1
    K4 = 3
    K5 = 0
    K6 = 1
"""
from __future__ import annotations

import os
import sys

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import CoefficientModel, Declared, InitialSegment, TimeGrid, _read_rows
from .models import BUILTINS, ExpressionError, builtin_model, expression_model

__all__ = ["ModelFileError", "parse_model_file", "parse_model", "load_phi"]

DECLARED_KEYS = ("q", "eta", "K1", "K2", "K3", "K4", "K5", "K6")


class ModelFileError(ValueError):
    pass


def _number(table, key, where):
    if key not in table:
        raise ModelFileError(f"missing field {where}{key}")
    v = table[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ModelFileError(f"field {where}{key} must be a number, got {v!r}")
    return float(v)


def parse_model(data: dict, source: str = "<model>") -> CoefficientModel:
    """Build a model from an already-parsed mapping (see module docstring)."""
    declared_tab = data.get("declared")
    if not isinstance(declared_tab, dict):
        raise ModelFileError(f"{source}: missing table declared")
    try:
        declared = Declared(**{k: _number(declared_tab, k, "declared.") for k in DECLARED_KEYS})
    except ModelFileError as exc:
        raise ModelFileError(f"{source}: {exc}") from None
    except ValueError as exc:
        raise ModelFileError(f"{source}: {exc}") from None
    tau = _number(data, "tau", "")
    d = int(data.get("d", 1))
    m = int(data.get("m", 1))
    if "builtin" in data:
        name = data["builtin"]
        if name not in BUILTINS:
            raise ModelFileError(f"{source}: unknown builtin {name!r}; choose from {sorted(BUILTINS)}")
        if d != 1 or m != 1:
            raise ModelFileError(f"{source}: builtin {name!r} is scalar (d = m = 1)")
        return builtin_model(name, tau=tau, declared=declared)
    for key in ("b", "sigma"):
        if key not in data:
            raise ModelFileError(f"{source}: need either builtin or both b and sigma (missing {key})")
    try:
        return expression_model(d, m, tau, data["b"], data["sigma"], declared,
                                name=os.path.basename(source))
    except ExpressionError as exc:
        raise ModelFileError(f"{source}: malformed expression: {exc}") from None


def parse_model_file(path) -> CoefficientModel:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ModelFileError(f"model file {path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ModelFileError(f"{path}: {exc}") from None
    return parse_model(data, str(path))


def load_phi(spec: str, grid: TimeGrid, d: int) -> InitialSegment:
    """Initial segment from an inline constant (``"1.0"`` or ``"1,0.5"``) or a CSV file.

    A CSV must hold the ``t,v0,..`` rows of the history nodes ``-tau .. 0``.
    """
    try:
        value = [float(s) for s in str(spec).split(",")]
    except ValueError:
        value = None
    if value is not None:
        if len(value) == 1:
            value = value * d
        if len(value) != d:
            raise ModelFileError(f"--phi has {len(value)} components, model has d={d}")
        return InitialSegment.constant(grid, value)
    t, v = _read_rows(spec)
    expect = grid.times[: grid.n_history + 1]
    if len(t) != len(expect) or not np.allclose(t, expect, atol=1e-9 * max(1.0, grid.tau)):
        raise ModelFileError(f"{spec}: phi rows must sit on the {len(expect)} history nodes")
    if v.shape[1] != d or not np.all(np.isfinite(v)):
        raise ModelFileError(f"{spec}: phi needs {d} finite columns")
    return InitialSegment(grid, v)

