import math

import numpy as np
import pytest

from hsipeft.layers import (AttentionLayer, EncoderBlock, LayerNorm,
                            LinearLayer, cross_entropy, cross_entropy_grad,
                            gelu, gelu_grad, mean_pool, mean_pool_grad,
                            softmax, softmax_grad)
from tests.conftest import central_difference


def scalar_diff(fn, arr, i, h=1e-6):
    return central_difference(fn, arr, i, h)


class TestLinear:
    def test_identity_weights(self, rng):
        layer = LinearLayer(4, 4, dtype=np.float64)
        layer.weight.value = np.eye(4)
        x = rng.normal(size=(3, 4))
        assert np.array_equal(layer.forward(x), x)

    def test_gradient_check(self, rng):
        layer = LinearLayer(6, 4, dtype=np.float64)
        layer.weight.value = rng.normal(size=(4, 6))
        layer.bias.value = rng.normal(size=4)
        x = rng.normal(size=(4, 6))
        target = rng.normal(size=(4, 4))

        def loss_fn():
            return float(((layer.forward(x) - target) ** 2).sum())

        layer.forward(x)
        layer.backward(2.0 * (layer.forward(x) - target))
        for p in layer.params():
            grads = p.grad.reshape(-1)
            for i in range(grads.size):
                numeric = scalar_diff(loss_fn, p.value, i, h=1e-4)
                assert abs(grads[i] - numeric) / max(abs(numeric), 1.0) <= 1e-6

    def test_frozen_weight_grad_stays_zero(self, rng):
        layer = LinearLayer(3, 2, dtype=np.float64)
        layer.weight.value = rng.normal(size=(2, 3))
        layer.weight.trainable = False
        layer.forward(rng.normal(size=(5, 3)))
        layer.backward(rng.normal(size=(5, 2)))
        assert not layer.weight.grad.any()
        assert layer.bias.grad.any()


class TestPointwiseOps:
    def test_softmax_constant_is_uniform(self):
        for n in (1, 3, 7):
            out = softmax(np.full(n, 2.5))
            assert np.allclose(out, np.full(n, 1.0 / n), atol=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.normal(size=(10, 6)).astype(np.float32))
        assert np.abs(p.sum(axis=-1) - 1.0).max() <= 1e-6

    def test_cross_entropy_closed_form(self):
        assert cross_entropy(np.array([0.0, 0.0]), np.array([0])) == \
            pytest.approx(math.log(2.0), abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((1, 3)), np.array([-1]))

    def test_softmax_gradient(self, rng):
        x = rng.normal(size=(2, 5))
        w = rng.normal(size=(2, 5))

        def loss_fn():
            return float((softmax(x) * w).sum())

        p = softmax(x)
        dx = softmax_grad(p, w)
        for i in range(x.size):
            numeric = scalar_diff(loss_fn, x, i)
            assert abs(dx.reshape(-1)[i] - numeric) <= 1e-5 * max(abs(numeric), 1.0)

    def test_gelu_gradient(self, rng):
        x = rng.normal(size=12)
        w = rng.normal(size=12)

        def loss_fn():
            return float((gelu(x) * w).sum())

        dx = gelu_grad(x, w)
        for i in range(x.size):
            numeric = scalar_diff(loss_fn, x, i)
            assert abs(dx[i] - numeric) <= 1e-5 * max(abs(numeric), 1.0)

    def test_layer_norm_gradient(self, rng):
        ln = LayerNorm(6, dtype=np.float64)
        ln.scale.value = rng.normal(size=6)
        ln.shift.value = rng.normal(size=6)
        x = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 6))

        def loss_fn():
            return float((ln.forward(x) * w).sum())

        ln.forward(x)
        dx = ln.backward(w)
        for i in range(x.size):
            numeric = scalar_diff(loss_fn, x, i)
            assert abs(dx.reshape(-1)[i] - numeric) <= 1e-5 * max(abs(numeric), 1.0)
        for p in ln.params():
            grads = p.grad.reshape(-1)
            for i in range(grads.size):
                numeric = scalar_diff(loss_fn, p.value, i)
                assert abs(grads[i] - numeric) <= 1e-5 * max(abs(numeric), 1.0)

    def test_cross_entropy_gradient(self, rng):
        logits = rng.normal(size=(3, 4))
        labels = np.array([0, 2, 3])

        def loss_fn():
            return cross_entropy(logits, labels)

        _, dlogits = cross_entropy_grad(logits, labels)
        for i in range(logits.size):
            numeric = scalar_diff(loss_fn, logits, i)
            assert abs(dlogits.reshape(-1)[i] - numeric) <= 1e-5

    def test_mean_pool_gradient(self, rng):
        x = rng.normal(size=(2, 4, 3))
        w = rng.normal(size=(2, 3))

        def loss_fn():
            return float((mean_pool(x) * w).sum())

        dx = mean_pool_grad(w, 4)
        for i in range(x.size):
            numeric = scalar_diff(loss_fn, x, i)
            assert abs(dx.reshape(-1)[i] - numeric) <= 1e-8


class ZeroDelta:
    """Adapter stub returning an exactly-zero contribution."""

    def delta(self, x):
        self._shape = x.shape
        return np.zeros(x.shape, dtype=x.dtype)

    def backward(self, d):
        return np.zeros(self._shape, dtype=d.dtype)


class TestAttention:
    def _layer(self, rng, dim=8, heads=2):
        layer = AttentionLayer(dim, heads, dtype=np.float64)
        for proj in (layer.q_proj, layer.k_proj, layer.v_proj, layer.out_proj):
            proj.weight.value = rng.normal(0, 0.3, proj.weight.value.shape)
            proj.bias.value = rng.normal(0, 0.1, proj.bias.value.shape)
        return layer

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            AttentionLayer(10, 4)

    def test_single_token(self, rng):
        layer = self._layer(rng)
        x = rng.normal(size=(1, 1, 8))
        # with one key the softmax weight is 1, so output = out_proj(v_proj(x))
        expected = layer.out_proj.forward(layer.v_proj.forward(x))
        assert np.allclose(layer.forward(x), expected, atol=1e-12)

    def test_single_token_with_value_adapter(self, rng):
        from hsipeft.adapters import AdapterSpec, LoraSite
        layer = self._layer(rng)
        site = LoraSite(0, "v", 8, 8, AdapterSpec("LoRA", rank=2), rng,
                        np.float64)
        site.B.value = rng.normal(size=site.B.shape)
        layer.v_adapter = site
        x = rng.normal(size=(1, 1, 8))
        expected = layer.out_proj.forward(
            layer.v_proj.forward(x) + site.delta(x))
        assert np.allclose(layer.forward(x), expected, atol=1e-12)

    def test_gradient_check(self, rng):
        layer = self._layer(rng)
        x = rng.normal(size=(1, 3, 8))
        w = rng.normal(size=(1, 3, 8))

        def loss_fn():
            return float((layer.forward(x) * w).sum())

        layer.forward(x)
        dx = layer.backward(w)
        for i in range(x.size):
            numeric = scalar_diff(loss_fn, x, i)
            assert abs(dx.reshape(-1)[i] - numeric) <= 1e-5 * max(abs(numeric), 1.0)
        for p in layer.params():
            grads = p.grad.reshape(-1)
            for i in range(grads.size):
                numeric = scalar_diff(loss_fn, p.value, i)
                assert abs(grads[i] - numeric) <= 1e-5 * max(abs(numeric), 1.0)

    def test_zero_adapters_bit_identical(self, rng):
        layer = self._layer(rng)
        x = rng.normal(size=(2, 4, 8))
        plain = layer.forward(x)
        layer.q_adapter = ZeroDelta()
        layer.v_adapter = ZeroDelta()
        hooked = layer.forward(x)
        assert np.array_equal(plain, hooked)

    def test_permutation_equivariance(self, rng):
        layer = self._layer(rng)
        x = rng.normal(size=(1, 5, 8))
        perm = rng.permutation(5)
        out = layer.forward(x)
        out_perm = layer.forward(x[:, perm])
        assert np.allclose(out[:, perm], out_perm, atol=1e-10)


class TestEncoderBlock:
    def test_gradient_check(self, rng):
        block = EncoderBlock(8, 2, dtype=np.float64)
        for layer in (block.attn.q_proj, block.attn.k_proj, block.attn.v_proj,
                      block.attn.out_proj, block.fc1, block.fc2):
            layer.weight.value = rng.normal(0, 0.2, layer.weight.value.shape)
        x = rng.normal(size=(1, 3, 8))
        w = rng.normal(size=(1, 3, 8))

        def loss_fn():
            return float((block.forward(x) * w).sum())

        block.forward(x)
        dx = block.backward(w)
        for i in range(x.size):
            numeric = scalar_diff(loss_fn, x, i)
            assert abs(dx.reshape(-1)[i] - numeric) <= 1e-5 * max(abs(numeric), 1.0)
