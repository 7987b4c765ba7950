import numpy as np
import pytest

from sddeldp import CoefficientModel, Declared, InitialSegment, builtin_model, make_grid

LOOSE = Declared(q=1, eta=2, K1=1, K2=1, K3=1, K4=1, K5=1, K6=1)


def scalar_model(b, sigma, tau=1.0, declared=LOOSE, name="test"):
    """d = m = 1 model from scalar lambdas ``f(t, x, y)`` acting on the state component."""
    def drift(t, x, y):
        return np.broadcast_to(np.asarray(b(t, x[..., 0], y[..., 0]), float)[..., None], x.shape).copy()

    def diffusion(t, x, y):
        s = np.broadcast_to(np.asarray(sigma(t, x[..., 0], y[..., 0]), float), x.shape[:-1])
        return s[..., None, None].copy()

    return CoefficientModel(d=1, m=1, tau=tau, b=drift, sigma=diffusion, declared=declared, name=name)


@pytest.fixture
def ou():
    return builtin_model("linear_ou")


@pytest.fixture
def cubic():
    return builtin_model("cubic_const_sigma")


@pytest.fixture
def brownian():
    return builtin_model("brownian")


def const_phi(grid, value=0.0):
    return InitialSegment.constant(grid, [value])


@pytest.fixture
def grid_unit():
    return make_grid(1.0, 0.01, 1.0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULTS", None):
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
