import numpy as np
import pytest

from diffocean import autodiff as ad


def numeric_grad(fn, x, h=1e-5):
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (float(fn(xp)) - float(fn(xm))) / (2 * h)
    return g


def analytic_grad(fn, x):
    tape = ad.Tape()
    leaf = tape.leaf(x)
    return tape.backward(fn(leaf))[leaf.id]


def max_rel_err(a, n):
    """Normwise: max abs deviation over the larger of the two max magnitudes."""
    a, n = np.asarray(a), np.asarray(n)
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    return float(np.abs(a - n).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
