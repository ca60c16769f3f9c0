import numpy as np
import pytest


def central_diff(f, arr, index, step):
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]`` (arr perturbed in place)."""
    old = arr[index]
    arr[index] = old + step
    up = f()
    arr[index] = old - step
    down = f()
    arr[index] = old
    return (up - down) / (2 * step)


def rel_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(f, arr, step):
    g = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        g[idx] = central_diff(f, arr, idx, step)
    return g


def max_rel_error(analytic, numeric, floor_frac=1e-3):
    """Largest per-component relative error.

    Components are compared against ``max(|a|, |n|, floor)`` where ``floor``
    is ``floor_frac`` times the largest gradient magnitude, so entries that
    are numerically zero do not divide by round-off.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = max(floor_frac * float(np.abs(numeric).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def norm_rel_error(analytic, numeric):
    """Vector relative error ||a - n|| / ||n||, used for 32-bit checks."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-30))


def grad_error(analytic, numeric, dtype):
    """Per-component error at 64-bit; norm-wise at 32-bit, where round-off in
    the forward pass swamps finite differences of small components."""
    if np.dtype(dtype) == np.float64:
        return max_rel_error(analytic, numeric)
    return norm_rel_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
