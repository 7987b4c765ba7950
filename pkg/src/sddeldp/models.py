"""Built-in coefficient models and runtime-defined expression models.

Expressions use a small arithmetic language: numbers, ``+ - * / ^``, unary
minus, parentheses, the variables ``t``, ``x`` and ``y`` with component
indexing (``x[0]``, ``y[1]``; a bare ``x`` means ``x[0]`` when ``d == 1``) and
the functions ``sin cos exp tanh sqrt abs log``.  Parsing goes through
:mod:`ast`; only that subset of nodes is accepted and every expression is
compiled to numpy closures, so evaluation is vectorised over batch axes.
"""
from __future__ import annotations

import ast
import math
import operator

import numpy as np

from .core import CoefficientModel, Declared

__all__ = ["BUILTINS", "builtin_model", "compile_expression", "expression_model", "ExpressionError"]


class ExpressionError(ValueError):
    pass


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: np.power}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh,
          "sqrt": np.sqrt, "abs": np.abs, "log": np.log}
_CONSTS = {"pi": math.pi, "e": math.e}


def _compile(node, d, src):
    if isinstance(node, ast.Expression):
        return _compile(node.body, d, src)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        v = float(node.value)
        return lambda t, x, y: v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        lhs, rhs = _compile(node.left, d, src), _compile(node.right, d, src)
        return lambda t, x, y: op(lhs(t, x, y), rhs(t, x, y))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = _compile(node.operand, d, src)
        if isinstance(node.op, ast.USub):
            return lambda t, x, y: -inner(t, x, y)
        return inner
    if isinstance(node, ast.Name):
        if node.id == "t":
            return lambda t, x, y: t
        if node.id in ("x", "y"):
            if d != 1:
                raise ExpressionError(f"{src!r}: bare {node.id!r} needs an index when d={d}")
            return _component(node.id, 0)
        if node.id in _CONSTS:
            v = _CONSTS[node.id]
            return lambda t, x, y: v
        raise ExpressionError(f"{src!r}: unknown name {node.id!r}")
    if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name) \
            and node.value.id in ("x", "y"):
        idx = node.slice
        if isinstance(idx, ast.Index):  # pragma: no cover - python < 3.9 AST
            idx = idx.value
        if not (isinstance(idx, ast.Constant) and isinstance(idx.value, int)):
            raise ExpressionError(f"{src!r}: component index must be an integer literal")
        if not 0 <= idx.value < d:
            raise ExpressionError(f"{src!r}: index {idx.value} out of range for d={d}")
        return _component(node.value.id, idx.value)
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
            and len(node.args) == 1 and not node.keywords:
        fn = _FUNCS[node.func.id]
        arg = _compile(node.args[0], d, src)
        return lambda t, x, y: fn(arg(t, x, y))
    raise ExpressionError(f"{src!r}: unsupported syntax {ast.dump(node)[:60]}")


def _component(var, i):
    if var == "x":
        return lambda t, x, y: x[..., i]
    return lambda t, x, y: y[..., i]


def compile_expression(src: str, d: int):
    """Compile an arithmetic expression into ``f(t, x, y)`` returning batch-shaped values."""
    if not isinstance(src, str) or not src.strip():
        raise ExpressionError(f"empty expression {src!r}")
    try:
        tree = ast.parse(src.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"{src!r}: {exc.msg}") from None
    return _compile(tree, d, src)


def _batch_shape(t, x):
    return np.broadcast_shapes(np.shape(t), x.shape[:-1])


def expression_model(d, m, tau, b, sigma, declared: Declared, name="expression") -> CoefficientModel:
    """Model from expression strings: ``b`` has ``d`` entries, ``sigma`` is ``d`` rows of ``m``.

    A scalar model may pass plain strings for ``b`` and ``sigma``.
    """
    b_src = [b] if isinstance(b, str) else list(b)
    if isinstance(sigma, str):
        s_src = [[sigma]]
    else:
        s_src = [[row] if isinstance(row, str) else list(row) for row in sigma]
    if len(b_src) != d:
        raise ExpressionError(f"b needs {d} expressions, got {len(b_src)}")
    if len(s_src) != d or any(len(r) != m for r in s_src):
        raise ExpressionError(f"sigma needs {d} rows of {m} expressions")
    b_fns = [compile_expression(s, d) for s in b_src]
    s_fns = [[compile_expression(s, d) for s in row] for row in s_src]

    def drift(t, x, y):
        shape = _batch_shape(t, x)
        return np.stack([np.broadcast_to(f(t, x, y), shape) for f in b_fns], axis=-1)

    def diffusion(t, x, y):
        shape = _batch_shape(t, x)
        rows = [np.stack([np.broadcast_to(f(t, x, y), shape) for f in row], axis=-1)
                for row in s_fns]
        return np.stack(rows, axis=-2)

    return CoefficientModel(d=d, m=m, tau=float(tau), b=drift, sigma=diffusion,
                            declared=declared, name=name)


# ---------------------------------------------------------------------------
# built-ins (all scalar: d = m = 1)


def _cubic_drift(t, x, y):
    return x - x ** 3 + y


def _unit_sigma(t, x, y):
    return np.ones(x.shape + (1,))


def _quadratic_sigma(t, x, y):
    return (0.5 * x * x)[..., None]


def _ou_drift(t, x, y):
    return -x


def _zero_drift(t, x, y):
    return np.zeros_like(x)


# Declared constants are valid global bounds for the stated eta (see README).
BUILTINS = {
    "cubic_const_sigma": (_cubic_drift, _unit_sigma,
                          Declared(q=3, eta=6, K1=1, K2=1.25, K3=1.5, K4=4, K5=0, K6=3)),
    "cubic_quadratic_sigma": (_cubic_drift, _quadratic_sigma,
                              Declared(q=3, eta=6, K1=1, K2=1.25, K3=1.5, K4=2.5, K5=0.5, K6=3)),
    "linear_ou": (_ou_drift, _unit_sigma,
                  Declared(q=1, eta=6, K1=1, K2=1, K3=1, K4=3, K5=0, K6=1)),
    "brownian": (_zero_drift, _unit_sigma,
                 Declared(q=1, eta=6, K1=1, K2=1, K3=1, K4=3, K5=0, K6=1)),
}


def builtin_model(name: str, tau: float = 1.0, declared: Declared | None = None) -> CoefficientModel:
    try:
        b, sigma, default = BUILTINS[name]
    except KeyError:
        raise ValueError(f"unknown builtin model {name!r}; choose from {sorted(BUILTINS)}") from None
    return CoefficientModel(d=1, m=1, tau=float(tau), b=b, sigma=sigma,
                            declared=declared or default, name=name)
