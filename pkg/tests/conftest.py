import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hawkes_attention import tensor as T

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, n, floor=1e-6) -> float:
    a = np.asarray(a)
    n = np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_grads(build, arrays, tol=1e-4, h=1e-5):
    """``build(*tensors)`` -> scalar Tensor; compares backward with central differences."""
    params = [T.parameter(a) for a in arrays]
    loss = build(*params)
    T.backward(loss)
    for p in params:
        def f():
            with T.no_grad():
                return build(*params).item()
        num = numeric_grad(f, p.data, h)
        err = max_rel_err(p.grad, num)
        assert err < tol, f"relative gradient error {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
