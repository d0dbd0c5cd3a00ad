import numpy as np
import pytest

from gradprune import autograd as ag
from gradprune.data import TriggerSpec, generate_synthetic
from gradprune.models import Conv2d, Dense, Flatten, Model, PruneMask, build_model
from gradprune.training import SgdConfig, train_backdoored

SHAPE = (1, 16, 16)


def central_difference(f, arr, eps=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        plus = f()
        flat[i] = old - eps
        minus = f()
        flat[i] = old
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def model_loss_gradients(model, x, y):
    logits, leaves = model.forward(x, record=True)
    return ag.backward(ag.softmax_cross_entropy(logits, y), params=leaves.values())


def tiny_model(weights, bias, dense_w, dense_b, shape=(1, 1, 1)):
    """Hand-built 1x1-conv model: conv(1 -> len(bias), k=1) -> flatten -> dense."""
    weights = np.asarray(weights, dtype=float)
    o = weights.shape[0]
    c, h, w = shape
    layers = [Conv2d(c, o, kernel_size=weights.shape[-1], padding=0), Flatten(),
              Dense(o * (h - weights.shape[-1] + 1) * (w - weights.shape[-1] + 1), len(dense_b))]
    params = {
        "conv0.weight": weights,
        "conv0.bias": np.asarray(bias, dtype=float),
        "dense0.weight": np.asarray(dense_w, dtype=float),
        "dense0.bias": np.asarray(dense_b, dtype=float),
    }
    return Model("custom", len(dense_b), shape, layers, params, PruneMask(), seed=None)


@pytest.fixture(scope="session")
def trig():
    return TriggerSpec.badnets(SHAPE)


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(4, 40, SHAPE, seed=11)


@pytest.fixture(scope="session")
def small_test():
    return generate_synthetic(4, 25, SHAPE, seed=12)


@pytest.fixture(scope="session")
def small_pool():
    return generate_synthetic(4, 30, SHAPE, seed=13)


@pytest.fixture(scope="session")
def quick_backdoored(small_data, trig):
    """A weakly trained backdoored cnn-small; cheap enough for unit tests."""
    return train_backdoored("cnn-small", small_data, trig, 0.1, SgdConfig(0.05, 0.9, 16, 8, seed=3))


@pytest.fixture
def fresh_model():
    return build_model("cnn-small", 4, SHAPE, seed=7)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
