import numpy as np
import pytest

from voxgrad.sdf_grid import SdfGrid


def random_grid(rng, res=4, dim=3, lo=-1.0, hi=1.0, scale=1.0) -> SdfGrid:
    res = (res,) * dim if np.isscalar(res) else tuple(res)
    spacing = (hi - lo) / (res[0] - 1)
    values = rng.uniform(-scale, scale, size=res)
    return SdfGrid(values.astype(np.float64), np.full(dim, lo), spacing)


def ramp_grid(res=5, dim=3, lo=-1.0, hi=1.0, dtype=np.float64) -> SdfGrid:
    return SdfGrid.from_function(lambda p: p[:, 0], res, np.full(dim, lo), np.full(dim, hi), dtype=dtype)


def central_diff(fn, x0: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of scalar ``fn`` w.r.t. every entry of x0."""
    x0 = np.array(x0, dtype=np.float64)
    out = np.zeros(x0.shape)
    flat = x0.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x0)
        flat[i] = old - h
        fm = fn(x0)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return out


def assert_grad_close(actual, expected, rtol):
    """Entrywise closeness relative to the largest expected magnitude."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(np.max(np.abs(expected)), 1e-30)
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=rtol * scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split('criterion ')[1].split(':')[0])):
            terminalreporter.write_line(line)
