import numpy as np
import pytest

from dqmq import dataquality as dq
from dqmq.model import build_backbone

TINY_MODEL = {"widths": [2, 3, 4, 4], "image_size": 8}


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` with respect to every array (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            up = f(*arrays)
            a[i] = old - eps
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-7):
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(n).max(), atol)
        assert np.abs(a - n).max() <= rtol * scale, (a, n)


@pytest.fixture
def tiny_model():
    return build_backbone(TINY_MODEL, seed=0)


@pytest.fixture(scope="session")
def tiny_data():
    base = dq.synth_dataset({"samples": 200, "image_size": 8}, seed=0)
    return dq.build_mixed(base, 40, seed=0)


@pytest.fixture(scope="session")
def synth_small():
    return dq.synth_dataset({"samples": 100}, seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
