"""Neural-network layers with explicit forward and backward passes.

Every layer caches what its backward pass needs during forward, so the
training loop is: forward -> backward -> optimizer step -> zero_grad.
Layers are single-writer during training; read-only inference on a built
model can be shared across threads.

Shape conventions: linear layers accept (..., in_features); attention and
encoder blocks accept (batch, tokens, dim).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-6

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Param:
    """A named trainable array with a gradient buffer and a freeze flag.

    Gradients accumulate across backward calls; a frozen parameter's grad
    buffer stays zero no matter what is backpropagated through it.

    Value and grad storage materialize on first access (as zeros), so
    models built purely for parameter accounting never allocate their
    85M-scalar weight arrays.
    """

    __slots__ = ("name", "shape", "dtype", "_value", "_grad", "trainable")

    def __init__(self, name: str, value: np.ndarray | None = None, *,
                 shape=None, dtype=None, trainable: bool = True):
        self.name = name
        if value is not None:
            self._value = value
            self.shape = value.shape
            self.dtype = value.dtype
        else:
            self._value = None
            self.shape = tuple(shape)
            self.dtype = np.dtype(dtype)
        self._grad = None
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        if self._value is None:
            self._value = np.zeros(self.shape, dtype=self.dtype)
        return self._value

    @value.setter
    def value(self, arr: np.ndarray) -> None:
        self._value = arr
        self.shape = arr.shape
        self.dtype = arr.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros(self.shape, dtype=self.dtype)
        return self._grad

    @grad.setter
    def grad(self, arr: np.ndarray) -> None:
        self._grad = arr

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def add_grad(self, g: np.ndarray) -> None:
        if self.trainable:
            self.grad += g

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Param({self.name}, shape={self.shape}{flag})"


class LinearLayer:
    """y = x @ W.T + b with weight (out, in) and bias (out,)."""

    def __init__(self, in_features: int, out_features: int, name: str = "linear",
                 dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(f"{name}.weight",
                            shape=(out_features, in_features), dtype=dtype)
        self.bias = Param(f"{name}.bias", shape=(out_features,), dtype=dtype)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_features:
            raise ValueError(
                f"{self.weight.name}: expected last dim {self.in_features}, "
                f"got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        x2 = x.reshape(-1, self.in_features)
        dy2 = dy.reshape(-1, self.out_features)
        self.weight.add_grad(dy2.T @ x2)
        self.bias.add_grad(dy2.sum(axis=0))
        return dy @ self.weight.value

    def params(self):
        yield self.weight
        yield self.bias


class LayerNorm:
    """Normalization over the channel (last) axis with learnable scale/shift."""

    def __init__(self, dim: int, name: str = "norm", dtype=np.float32):
        self.dim = dim
        self.scale = Param(f"{name}.scale", np.ones(dim, dtype=dtype))
        self.shift = Param(f"{name}.shift", shape=(dim,), dtype=dtype)
        self._xhat = None
        self._inv_std = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + np.asarray(LAYER_NORM_EPS, dtype=x.dtype))
        xhat = xc * inv_std
        self._xhat = xhat
        self._inv_std = inv_std
        return self.scale.value * xhat + self.shift.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat = self._xhat
        lead = tuple(range(dy.ndim - 1))
        self.scale.add_grad((dy * xhat).sum(axis=lead))
        self.shift.add_grad(dy.sum(axis=lead))
        dxhat = dy * self.scale.value
        mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return self._inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)

    def params(self):
        yield self.scale
        yield self.shift


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-form) GELU: x * Phi(x)."""
    return x * (0.5 * (1.0 + erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype))))


def gelu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype)))
    pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT_2PI, dtype=x.dtype)
    return dy * (cdf + x * pdf)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along `axis`."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_grad(p: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backward of softmax given its output p."""
    inner = (dy * p).sum(axis=axis, keepdims=True)
    return p * (dy - inner)


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Average over the token axis: (..., T, d) -> (..., d)."""
    return x.mean(axis=-2)


def mean_pool_grad(dy: np.ndarray, n_tokens: int) -> np.ndarray:
    scale = np.asarray(1.0 / n_tokens, dtype=dy.dtype)
    return np.repeat((dy * scale)[..., None, :], n_tokens, axis=-2)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"label out of range [0, {n_classes}): "
            f"min={labels.min()}, max={labels.max()}")
    return labels


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of integer labels under the logits."""
    logits = np.atleast_2d(logits)
    labels = _check_labels(labels, logits.shape[-1]).reshape(-1)
    logp = log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray):
    """Return (loss, dlogits) for the mean cross-entropy over the batch."""
    squeeze = logits.ndim == 1
    logits = np.atleast_2d(logits)
    labels = _check_labels(labels, logits.shape[-1]).reshape(-1)
    n = labels.size
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad = (grad / n).astype(logits.dtype)
    return loss, (grad[0] if squeeze else grad)


class AttentionLayer:
    """Multi-head self-attention over (batch, T, d) with adapter hooks.

    Adapters attach only to the query and value projections; when a hook is
    set, its delta is added to the projection output: y_q = q_proj(x) + dq(x).
    With hooks absent or zero-valued the forward is bit-identical to plain
    attention.
    """

    def __init__(self, dim: int, heads: int, name: str = "attn",
                 dtype=np.float32, dropout: float = 0.0):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.dropout = float(dropout)
        self.q_proj = LinearLayer(dim, dim, f"{name}.q_proj", dtype)
        self.k_proj = LinearLayer(dim, dim, f"{name}.k_proj", dtype)
        self.v_proj = LinearLayer(dim, dim, f"{name}.v_proj", dtype)
        self.out_proj = LinearLayer(dim, dim, f"{name}.out_proj", dtype)
        self.q_adapter = None
        self.v_adapter = None
        self._cache = None
        self._squeezed = False

    def _split(self, t: np.ndarray) -> np.ndarray:
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, t: np.ndarray) -> np.ndarray:
        b, _, n, _ = t.shape
        return np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(b, n, self.dim)

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        self._squeezed = x.ndim == 2
        if self._squeezed:
            x = x[None]
        q = self.q_proj.forward(x)
        if self.q_adapter is not None:
            q = q + self.q_adapter.delta(x)
        k = self.k_proj.forward(x)
        v = self.v_proj.forward(x)
        if self.v_adapter is not None:
            v = v + self.v_adapter.delta(x)

        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        inv_scale = np.asarray(1.0 / math.sqrt(self.head_dim), dtype=x.dtype)
        scores = np.matmul(qh, kh.swapaxes(-1, -2)) * inv_scale
        probs = softmax(scores)
        if self.dropout > 0.0 and rng is not None:
            keep = 1.0 - self.dropout
            mask = (rng.random(probs.shape) < keep).astype(probs.dtype) / keep
            attn = probs * mask
        else:
            mask = None
            attn = probs
        ctx = np.matmul(attn, vh)
        self._cache = (qh, kh, vh, probs, mask, inv_scale)
        out = self.out_proj.forward(self._merge(ctx))
        return out[0] if self._squeezed else out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._squeezed:
            dy = dy[None]
        qh, kh, vh, probs, mask, inv_scale = self._cache
        dctx = self._split(self.out_proj.backward(dy))
        attn = probs if mask is None else probs * mask
        dattn = np.matmul(dctx, vh.swapaxes(-1, -2))
        dvh = np.matmul(attn.swapaxes(-1, -2), dctx)
        if mask is not None:
            dattn = dattn * mask
        dscores = softmax_grad(probs, dattn) * inv_scale
        dqh = np.matmul(dscores, kh)
        dkh = np.matmul(dscores.swapaxes(-1, -2), qh)

        dq = self._merge(dqh)
        dk = self._merge(dkh)
        dv = self._merge(dvh)
        dx = self.q_proj.backward(dq)
        dx += self.k_proj.backward(dk)
        dx += self.v_proj.backward(dv)
        if self.q_adapter is not None:
            dx += self.q_adapter.backward(dq)
        if self.v_adapter is not None:
            dx += self.v_adapter.backward(dv)
        return dx[0] if self._squeezed else dx

    def params(self):
        for layer in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            yield from layer.params()


class EncoderBlock:
    """Pre-norm transformer block: attention and a GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4,
                 name: str = "block", dtype=np.float32, dropout: float = 0.0):
        hidden = dim * mlp_ratio
        self.norm1 = LayerNorm(dim, f"{name}.norm1", dtype)
        self.attn = AttentionLayer(dim, heads, f"{name}.attn", dtype, dropout)
        self.norm2 = LayerNorm(dim, f"{name}.norm2", dtype)
        self.fc1 = LinearLayer(dim, hidden, f"{name}.fc1", dtype)
        self.fc2 = LinearLayer(hidden, dim, f"{name}.fc2", dtype)
        self._h = None

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        x = x + self.attn.forward(self.norm1.forward(x), rng)
        h = self.fc1.forward(self.norm2.forward(x))
        self._h = h
        return x + self.fc2.forward(gelu(h))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = gelu_grad(self._h, self.fc2.backward(dy))
        dx = dy + self.norm2.backward(self.fc1.backward(dh))
        dx = dx + self.norm1.backward(self.attn.backward(dx))
        return dx

    def params(self):
        yield from self.norm1.params()
        yield from self.attn.params()
        yield from self.norm2.params()
        yield from self.fc1.params()
        yield from self.fc2.params()
