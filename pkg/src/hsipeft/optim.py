"""AdamW with parameter groups and the differentiated-learning-rate scheme.

For the Plus methods the zero-initialized output-side factors train at
lr_ratio times the base learning rate while everything else rides at the
base rate; with lr_ratio == 1 the update sequence is bit-identical to the
plain method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import PLUS_METHODS, AdapterState
from .layers import Param
from .model import VitModel


class NumericalError(RuntimeError):
    """Raised when NaNs show up in gradients or losses."""


@dataclass
class OptimizerConfig:
    base_lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    lr_ratio: float = 1.0  # lambda, >= 1, Plus methods only


class ParamGroup:
    """A set of parameters sharing a learning rate and decay setting."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params: list[Param] = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]


class AdamW:
    """Decoupled-weight-decay Adam over explicit parameter groups."""

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups: list[ParamGroup] = list(groups)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self.lr_scale = 1.0  # warmup hook; 1.0 = constant learning rate

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for group in self.groups:
            lr = group.lr * self.lr_scale
            wd = group.weight_decay
            for p, m, v in zip(group.params, group.m, group.v):
                g = p.grad
                if np.isnan(g).any():
                    raise NumericalError(f"NaN gradient in parameter {p.name}")
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if wd != 0.0:
                    update = update + wd * p.value
                p.value -= lr * update

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.zero_grad()


def build_groups(model: VitModel, state: AdapterState | None,
                 cfg: OptimizerConfig) -> list[ParamGroup]:
    """Partition the trainable parameters into learning-rate groups.

    Plus methods get three groups: the Gaussian-initialized factors at the
    base rate, the zero-initialized factors at lr_ratio times that, and the
    classifier head at the base rate. Every other method trains in a single
    group at the base rate.
    """
    model_trainables = [p for p in model.params() if p.trainable]
    adapter_trainables = []
    if state is not None:
        adapter_trainables = [p for p in state.adapter_params() if p.trainable]

    if state is not None and state.spec.method in PLUS_METHODS:
        if cfg.lr_ratio < 1.0:
            raise ValueError(
                f"lr ratio must be >= 1 for {state.spec.method}, "
                f"got {cfg.lr_ratio}")
        return [
            ParamGroup(state.other_factors(), cfg.base_lr, cfg.weight_decay),
            ParamGroup(state.zero_factors(), cfg.lr_ratio * cfg.base_lr,
                       cfg.weight_decay),
            ParamGroup(model_trainables, cfg.base_lr, cfg.weight_decay),
        ]
    return [ParamGroup(model_trainables + adapter_trainables,
                       cfg.base_lr, cfg.weight_decay)]


def make_optimizer(model: VitModel, state: AdapterState | None,
                   cfg: OptimizerConfig) -> AdamW:
    return AdamW(build_groups(model, state, cfg), betas=cfg.betas, eps=cfg.eps)
