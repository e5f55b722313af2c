import numpy as np
import pytest

from adapter import ndcore as nd
from adapter.data import SyntheticSpec, synth_generate
from adapter.model import ModelConfig


def central_diff(f, array, eps=1e-6):
    """Finite-difference gradient of scalar ``f()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture
def f64():
    with nd.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(image_size=8, embed_dim=16, depth=2, heads=2, conv_channels=8)


@pytest.fixture(scope="session")
def synthetic_domains():
    return synth_generate(SyntheticSpec())
