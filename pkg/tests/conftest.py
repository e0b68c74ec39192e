import numpy as np
import pytest

from hsipeft.layers import cross_entropy, cross_entropy_grad
from hsipeft.model import ModelConfig, VitModel


def central_difference(loss_fn, array: np.ndarray, index: int, h: float) -> float:
    """Two-sided difference quotient for one scalar of `array`."""
    flat = array.reshape(-1)
    old = flat[index]
    flat[index] = old + h
    lp = loss_fn()
    flat[index] = old - h
    lm = loss_fn()
    flat[index] = old
    return (lp - lm) / (2.0 * h)


def max_grad_error(model, params, x, labels, h=1e-5, floor=1e-4):
    """Worst relative error of analytic grads vs central differences.

    The denominator is floored so that near-zero gradients are compared
    absolutely at the same tolerance.
    """
    model.zero_grads()
    for p in params:
        p.grad[...] = 0
    loss, dlogits = cross_entropy_grad(model.forward(x), labels)
    model.backward(dlogits)

    def loss_fn():
        return cross_entropy(model.forward(x), labels)

    worst = 0.0
    for p in params:
        grads = p.grad.reshape(-1)
        for i in range(grads.size):
            numeric = central_difference(loss_fn, p.value, i, h)
            err = abs(grads[i] - numeric) / max(abs(numeric), floor)
            worst = max(worst, err)
    return worst


def tiny_model(n_classes=3, embed_dim=16, depth=2, heads=4, seed=42,
               dtype=np.float64) -> VitModel:
    cfg = ModelConfig(n_classes=n_classes, embed_dim=embed_dim, depth=depth,
                      heads=heads)
    return VitModel(cfg, rng=np.random.default_rng(seed), dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
