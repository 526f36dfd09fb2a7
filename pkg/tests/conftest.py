import numpy as np
import pytest

from activerecon import autodiff as ad


def central_difference(f, tensor, indices=None, h=1e-5):
    """Independent gradient oracle: central finite differences of a scalar
    function of the tensor's data, evaluated coordinate by coordinate."""
    if indices is None:
        indices = [np.unravel_index(i, tensor.data.shape)
                   for i in range(tensor.data.size)]
    grad = {}
    for idx in indices:
        old = tensor.data[idx]
        tensor.data[idx] = old + h
        fp = f()
        tensor.data[idx] = old - h
        fm = f()
        tensor.data[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, fd: dict) -> float:
    """max |analytic - fd| scaled by the largest gradient magnitude seen."""
    scale = max(max(abs(v) for v in fd.values()), 1e-10)
    return max(abs(analytic[idx] - v) for idx, v in fd.items()) / scale


def nograd_scalar(fn):
    """Evaluate a loss-building closure without recording, return a float."""
    with ad.no_grad():
        return fn().item()


@pytest.fixture(autouse=True)
def _pristine_tape():
    ad._STATE.nodes = []
    yield
    ad._STATE.nodes = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small shared dataset for harness-level tests."""
    from activerecon.dataset import build_dataset

    path = tmp_path_factory.mktemp("data") / "tiny"
    build_dataset(path, count=24, seed=3)
    return path
