import math
import time

import numpy as np
import pytest


def loop_softmax(row):
    e = [math.exp(v) for v in row]
    s = sum(e)
    return [v / s for v in e]


def fd_grad(f, x, h=1e-5):
    """Central differences, written independently of the package helper."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_labeled(rng, n, k, scale=3.0):
    return rng.normal(size=(n, k)) * scale, rng.integers(0, k, size=n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ----------------------------------------------------------

SESSION_START = time.monotonic()
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"C{criterion} {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_collection_modifyitems(items):
    # the wall-clock criterion must observe every other test
    last = [it for it in items if it.name.startswith("test_c10_")]
    items[:] = [it for it in items if it not in last] + last


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"C{c} {'PASS' if ok else 'FAIL'}: {detail}")
    terminalreporter.write_line(f"session wall clock {time.monotonic() - SESSION_START:.1f} s")
