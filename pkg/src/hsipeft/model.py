"""Spectral vision transformer classifier.

The 32x32x12 input is tiled into 8x8x3 spatial-spectral tokens (64 tokens
at the defaults), each flattened and linearly embedded. Two learned
positional embeddings are summed into every token: one indexed by spatial
grid position, one by spectral group. An encoder stack, final layer norm,
mean-pool over tokens and a linear head produce the class logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .layers import (EncoderBlock, LayerNorm, LinearLayer, Param,
                     cross_entropy_grad, mean_pool, mean_pool_grad)

INIT_STD = 0.02
_TRUNC_LO = float(ndtr(-2.0))
_TRUNC_HI = float(ndtr(2.0))


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    input_hw: int = 32
    input_bands: int = 12
    token_hw: int = 8
    token_depth: int = 3
    token_stride: int | None = None  # None = non-overlapping tiling
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.token_hw not in (8, 16):
            raise ValueError(f"token_hw must be 8 or 16, got {self.token_hw}")
        stride = self.token_stride or self.token_hw
        if (self.input_hw - self.token_hw) % stride != 0:
            raise ValueError(
                f"token grid does not tile input: hw={self.input_hw}, "
                f"token={self.token_hw}, stride={stride}")
        if self.input_bands % self.token_depth != 0:
            raise ValueError(
                f"input_bands {self.input_bands} not divisible by "
                f"token_depth {self.token_depth}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid_side(self) -> int:
        stride = self.token_stride or self.token_hw
        return (self.input_hw - self.token_hw) // stride + 1

    @property
    def n_spatial(self) -> int:
        return self.grid_side ** 2

    @property
    def n_groups(self) -> int:
        return self.input_bands // self.token_depth

    @property
    def n_tokens(self) -> int:
        return self.n_spatial * self.n_groups

    @property
    def token_dim(self) -> int:
        return self.token_hw * self.token_hw * self.token_depth


_PRESETS = {
    "base": dict(embed_dim=768, depth=12, heads=12),
    "tiny": dict(embed_dim=64, depth=2, heads=4),
}


def preset_config(name: str, n_classes: int, **overrides) -> ModelConfig:
    if name == "custom":
        return ModelConfig(n_classes=n_classes, **overrides)
    if name not in _PRESETS:
        raise ValueError(f"unknown model preset '{name}'")
    fields = dict(_PRESETS[name])
    fields.update(overrides)
    return ModelConfig(n_classes=n_classes, **fields)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std^2) truncated at +/-2 std, via the inverse CDF."""
    u = rng.uniform(_TRUNC_LO, _TRUNC_HI, size=shape)
    return (ndtri(u) * std).astype(dtype)


def tokenize(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Cut (..., hw, hw, bands) into flattened 3D tokens.

    Token order: spatial grid row-major with spectral groups fastest.
    Each token is the (row, col, band) row-major flattening of its sub-block.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    expected = (config.input_hw, config.input_hw, config.input_bands)
    if x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape[1:]} != expected {expected}")
    n = x.shape[0]
    th, td, g = config.token_hw, config.token_depth, config.n_groups
    stride = config.token_stride or config.token_hw
    side = config.grid_side

    if stride == th:
        t = x.reshape(n, side, th, side, th, g, td)
        t = t.transpose(0, 1, 3, 5, 2, 4, 6)
        tokens = np.ascontiguousarray(t).reshape(n, config.n_tokens, config.token_dim)
    else:
        tokens = np.empty((n, config.n_tokens, config.token_dim), dtype=x.dtype)
        idx = 0
        for r in range(side):
            for c in range(side):
                block = x[:, r * stride:r * stride + th, c * stride:c * stride + th, :]
                for gi in range(g):
                    sub = block[..., gi * td:(gi + 1) * td]
                    tokens[:, idx] = sub.reshape(n, -1)
                    idx += 1
    return tokens[0] if squeeze else tokens


class VitModel:
    """Token embedder, dual positional embeddings, encoder stack, pooled head.

    Pass rng=None to build with zero weights (cheap, used for parameter
    accounting); pass a numpy Generator for the standard trainable init.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        d = config.embed_dim
        self.embed = LinearLayer(config.token_dim, d, "embed", dtype)
        self.spatial_pos = Param("spatial_pos", shape=(config.n_spatial, d),
                                 dtype=dtype)
        self.spectral_pos = Param("spectral_pos", shape=(config.n_groups, d),
                                  dtype=dtype)
        self.blocks = [
            EncoderBlock(d, config.heads, config.mlp_ratio, f"blocks.{i}",
                         dtype, config.dropout)
            for i in range(config.depth)
        ]
        self.final_norm = LayerNorm(d, "final_norm", dtype)
        self.head = LinearLayer(d, config.n_classes, "head", dtype)
        if rng is not None:
            self._init_weights(rng)
        self._tokens = None
        self._squeezed = False

    def _init_weights(self, rng: np.random.Generator) -> None:
        self.embed.weight.value = trunc_normal(
            rng, self.embed.weight.value.shape, INIT_STD, self.dtype)
        self.spatial_pos.value = rng.normal(
            0.0, INIT_STD, self.spatial_pos.value.shape).astype(self.dtype)
        self.spectral_pos.value = rng.normal(
            0.0, INIT_STD, self.spectral_pos.value.shape).astype(self.dtype)
        for block in self.blocks:
            for layer in (block.attn.q_proj, block.attn.k_proj,
                          block.attn.v_proj, block.attn.out_proj,
                          block.fc1, block.fc2):
                layer.weight.value = trunc_normal(
                    rng, layer.weight.value.shape, INIT_STD, self.dtype)
        self.head.weight.value = trunc_normal(
            rng, self.head.weight.value.shape, INIT_STD, self.dtype)

    def pos_embedding(self) -> np.ndarray:
        """Per-token positional embedding: spatial_pos[i] + spectral_pos[g]."""
        g = self.config.n_groups
        return (np.repeat(self.spatial_pos.value, g, axis=0)
                + np.tile(self.spectral_pos.value, (self.config.n_spatial, 1)))

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        tokens = tokenize(np.asarray(x, dtype=self.dtype), self.config)
        self._squeezed = tokens.ndim == 2
        if self._squeezed:
            tokens = tokens[None]
        self._tokens = tokens
        h = self.embed.forward(tokens) + self.pos_embedding()
        for block in self.blocks:
            h = block.forward(h, rng)
        h = self.final_norm.forward(h)
        logits = self.head.forward(mean_pool(h))
        return logits[0] if self._squeezed else logits

    def backward(self, dlogits: np.ndarray) -> None:
        if self._squeezed:
            dlogits = dlogits[None]
        dpool = self.head.backward(dlogits)
        dh = mean_pool_grad(dpool, self.config.n_tokens)
        dh = self.final_norm.backward(dh)
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        g = self.config.n_groups
        dpos = dh.sum(axis=0).reshape(self.config.n_spatial, g, -1)
        self.spatial_pos.add_grad(dpos.sum(axis=1))
        self.spectral_pos.add_grad(dpos.sum(axis=0))
        self.embed.backward(dh)

    def loss_and_backward(self, x: np.ndarray, labels: np.ndarray, rng=None) -> float:
        logits = self.forward(x, rng)
        loss, dlogits = cross_entropy_grad(logits, labels)
        self.backward(dlogits)
        return loss

    def params(self):
        yield from self.embed.params()
        yield self.spatial_pos
        yield self.spectral_pos
        for block in self.blocks:
            yield from block.params()
        yield from self.final_norm.params()
        yield from self.head.params()

    def named_params(self) -> dict:
        return {p.name: p for p in self.params()}

    def set_all_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.trainable = flag

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


def count_all_params(model: VitModel) -> int:
    """Exact scalar count including positional embeddings and head."""
    return sum(p.size for p in model.params())
