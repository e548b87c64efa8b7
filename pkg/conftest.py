import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import Config  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale training runs (set MOPINN_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("MOPINN_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set MOPINN_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def output_dir(tmp_path, monkeypatch):
    path = tmp_path / "mopinn_output"
    monkeypatch.setattr(Config, "OUTPUT_DIR", str(path))
    return path


@pytest.fixture
def fd_gradient():
    """Central differences of ``loss_fn()`` over every entry of ``arrays`` (perturbed in place)."""

    def compute(loss_fn, arrays, step=1e-6):
        grads = []
        for array in arrays:
            grad = np.zeros_like(array)
            for idx in np.ndindex(array.shape):
                original = array[idx]
                array[idx] = original + step
                plus = loss_fn()
                array[idx] = original - step
                minus = loss_fn()
                array[idx] = original
                grad[idx] = (plus - minus) / (2.0 * step)
            grads.append(grad)
        return grads

    return compute


def assert_gradients_close(analytic, numeric, rtol=1e-5):
    analytic = np.concatenate([np.ravel(a) for a in analytic])
    numeric = np.concatenate([np.ravel(n) for n in numeric])
    scale = max(np.max(np.abs(numeric)), 1e-12)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=rtol * 1e-2 * scale)
