"""Run configuration: flat "key = value" files with [section] headers.

Unknown sections or keys are hard errors; silent typos would break the
bit-exact reproducibility the harness promises.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .adapters import METHODS, AdapterSpec


class ConfigError(ValueError):
    """Malformed config text, unknown keys, or invalid values."""


def parse_config_text(text: str, source: str = "<config>") -> dict:
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"{source}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        sections[current][key] = value.strip()
    return sections


def _to_bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {value!r}")


def _to_float_list(value: str) -> list:
    return [float(v) for v in value.split(",") if v.strip()]


def _to_int_list(value: str) -> list:
    return [int(v) for v in value.split(",") if v.strip()]


@dataclass
class RunConfig:
    # [data]
    cube_path: str | None = None
    label_path: str | None = None
    synth_h: int | None = None
    synth_w: int | None = None
    synth_bands: int | None = None
    synth_classes: int | None = None
    synth_noise_std: float = 0.05
    synth_seed: int = 0
    # [pipeline]
    patch_size: int = 9
    normalization: str = "standardize"
    norm_mean: list | None = None
    norm_std: list | None = None
    pca_components: int = 12
    augment: bool = True
    aug_flip_prob: float = 0.5
    aug_radiation_prob: float = 0.5
    aug_mixture_prob: float = 0.25
    aug_noise_std: float = 1.0 / 25.0
    # [split]
    train_per_class: int | list = 50
    split_seed: int = 1
    # [model]
    model_preset: str = "base"
    n_classes: int | None = None
    embed_dim: int | None = None
    depth: int | None = None
    heads: int | None = None
    token_hw: int = 8
    token_depth: int = 3
    dropout: float = 0.0
    init_checkpoint: str | None = None  # user-supplied base weights
    # [adapter]
    method: str = "LoRA"
    rank: int = 4
    alpha: float = 4.0
    kron_a_shape: tuple = (384, 2)
    kron_scale: float = 1.0
    lokr_factor: int = 8
    lokr_rank: int = 8
    lokr_gamma: float = 1.0
    init_std: float = 0.02
    # [optim]
    lr: float = 5e-3
    lr_ratio: float = 1.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 0
    # [train]
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    # [output]
    out_dir: str = "out"

    def adapter_spec(self) -> AdapterSpec:
        return AdapterSpec(
            method=self.method, rank=self.rank, alpha=self.alpha,
            kron_a_shape=tuple(self.kron_a_shape), kron_scale=self.kron_scale,
            lokr_factor=self.lokr_factor, lokr_rank=self.lokr_rank,
            lokr_gamma=self.lokr_gamma, lr_ratio=self.lr_ratio,
            init_std=self.init_std)

    def uses_synth(self) -> bool:
        return self.cube_path is None

    def validate(self) -> None:
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        if self.normalization not in ("standardize", "minmax"):
            raise ConfigError(f"unknown normalization '{self.normalization}'")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}'; "
                              f"choose one of {', '.join(METHODS)}")
        if (self.cube_path is None) != (self.label_path is None):
            raise ConfigError("cube and labels paths must be given together")
        if self.cube_path is None and self.synth_h is None:
            raise ConfigError("either [data] cube/labels paths or synth_* "
                              "parameters are required")
        if self.synth_classes is not None and self.synth_classes < 1:
            raise ConfigError("synth_classes must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.model_preset not in ("base", "tiny", "custom"):
            raise ConfigError(f"unknown model preset '{self.model_preset}'")
        try:
            self.adapter_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _parse_kron_shape(value: str) -> tuple:
    left, sep, right = value.partition("x")
    if not sep:
        raise ConfigError(f"kron_a_shape must look like '384x2', got {value!r}")
    return int(left), int(right)


# (section, key) -> (attribute, converter)
_SCHEMA = {
    ("data", "cube"): ("cube_path", str),
    ("data", "labels"): ("label_path", str),
    ("data", "synth_h"): ("synth_h", int),
    ("data", "synth_w"): ("synth_w", int),
    ("data", "synth_bands"): ("synth_bands", int),
    ("data", "synth_classes"): ("synth_classes", int),
    ("data", "synth_noise_std"): ("synth_noise_std", float),
    ("data", "synth_seed"): ("synth_seed", int),
    ("pipeline", "patch_size"): ("patch_size", int),
    ("pipeline", "normalization"): ("normalization", str),
    ("pipeline", "norm_mean"): ("norm_mean", _to_float_list),
    ("pipeline", "norm_std"): ("norm_std", _to_float_list),
    ("pipeline", "pca_components"): ("pca_components", int),
    ("pipeline", "augment"): ("augment", _to_bool),
    ("pipeline", "aug_flip_prob"): ("aug_flip_prob", float),
    ("pipeline", "aug_radiation_prob"): ("aug_radiation_prob", float),
    ("pipeline", "aug_mixture_prob"): ("aug_mixture_prob", float),
    ("pipeline", "aug_noise_std"): ("aug_noise_std", float),
    ("split", "train_per_class"): ("train_per_class", _to_int_list),
    ("split", "seed"): ("split_seed", int),
    ("model", "preset"): ("model_preset", str),
    ("model", "n_classes"): ("n_classes", int),
    ("model", "embed_dim"): ("embed_dim", int),
    ("model", "depth"): ("depth", int),
    ("model", "heads"): ("heads", int),
    ("model", "token_hw"): ("token_hw", int),
    ("model", "token_depth"): ("token_depth", int),
    ("model", "dropout"): ("dropout", float),
    ("model", "init_checkpoint"): ("init_checkpoint", str),
    ("adapter", "method"): ("method", str),
    ("adapter", "rank"): ("rank", int),
    ("adapter", "alpha"): ("alpha", float),
    ("adapter", "kron_a_shape"): ("kron_a_shape", _parse_kron_shape),
    ("adapter", "kron_scale"): ("kron_scale", float),
    ("adapter", "lokr_factor"): ("lokr_factor", int),
    ("adapter", "lokr_rank"): ("lokr_rank", int),
    ("adapter", "lokr_gamma"): ("lokr_gamma", float),
    ("adapter", "init_std"): ("init_std", float),
    ("optim", "lr"): ("lr", float),
    ("optim", "lambda"): ("lr_ratio", float),
    ("optim", "weight_decay"): ("weight_decay", float),
    ("optim", "beta1"): ("beta1", float),
    ("optim", "beta2"): ("beta2", float),
    ("optim", "eps"): ("eps", float),
    ("optim", "warmup_epochs"): ("warmup_epochs", int),
    ("train", "epochs"): ("epochs", int),
    ("train", "batch_size"): ("batch_size", int),
    ("train", "seed"): ("seed", int),
    ("output", "dir"): ("out_dir", str),
}

_KNOWN_SECTIONS = {section for section, _ in _SCHEMA}


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return config_from_text(text, source=str(path), overrides=overrides)


def config_from_text(text: str, source: str = "<config>",
                     overrides: dict | None = None) -> RunConfig:
    sections = parse_config_text(text, source)
    cfg = RunConfig()
    for section, kv in sections.items():
        if section not in _KNOWN_SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in kv.items():
            entry = _SCHEMA.get((section, key))
            if entry is None:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            attr, conv = entry
            try:
                setattr(cfg, attr, conv(value))
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(
                    f"{source}: bad value for {section}.{key}: {exc}") from exc
    if isinstance(cfg.train_per_class, list) and len(cfg.train_per_class) == 1:
        cfg.train_per_class = cfg.train_per_class[0]
    for key, value in (overrides or {}).items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Canonical echo of the resolved configuration (one attr per line)."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
