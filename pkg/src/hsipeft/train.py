"""End-to-end training and evaluation wiring.

One invocation: load or synthesize a cube, PCA to 12 bands, split pixels,
extract/resize/normalize patches, attach the chosen method, then run the
AdamW loop with per-epoch test evaluation. Outputs are a best-by-OA
checkpoint, a per-epoch CSV log, and a metrics report quoting both the
best and the final epoch.

All randomness flows from the run seed through tagged SeedSequence
streams, so identical configs produce byte-identical outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import adapters, metrics, pipeline
from .config import RunConfig
from .model import ModelConfig, VitModel, preset_config
from .optim import NumericalError, OptimizerConfig, make_optimizer

EVAL_BATCH = 128

# SeedSequence stream tags
_STREAM_MODEL = 0
_STREAM_ADAPTER = 1
_STREAM_SHUFFLE = 2
_STREAM_DROPOUT = 4


def _stream(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass
class Dataset:
    train_x: np.ndarray   # (N, 32, 32, 12) normalized
    train_y: np.ndarray   # (N,) 1-based class ids
    test_x: np.ndarray
    test_y: np.ndarray
    pools: dict           # class id -> training patches of that class
    stats: pipeline.NormStats
    split: pipeline.SplitTable
    cube12: pipeline.HsiCube
    ratios: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.cube12.n_classes


def load_or_synth_cube(cfg: RunConfig) -> pipeline.HsiCube:
    if cfg.cube_path is not None:
        return pipeline.read_hsi(cfg.cube_path, cfg.label_path)
    return pipeline.synth_cube(cfg.synth_h, cfg.synth_w, cfg.synth_bands,
                               cfg.synth_classes, cfg.synth_noise_std,
                               cfg.synth_seed)


def _patches_for(cube12: pipeline.HsiCube, coords, patch_size: int,
                 input_hw: int) -> np.ndarray:
    out = np.empty((len(coords), input_hw, input_hw, cube12.shape[-1]),
                   dtype=np.float32)
    for i, (r, c, _) in enumerate(coords):
        raw = pipeline.extract_patch(cube12.reflectance, (r, c), patch_size)
        out[i] = pipeline.resize_bilinear(raw, input_hw)
    return out


def prepare_data(cfg: RunConfig, input_hw: int = 32) -> Dataset:
    cube = load_or_synth_cube(cfg)
    cube12, ratios = pipeline.pca_reduce(cube, cfg.pca_components)

    counts = cfg.train_per_class
    if isinstance(counts, list):
        counts = {i + 1: v for i, v in enumerate(counts)}
    split = pipeline.build_split(cube12, counts, cfg.split_seed)

    train_coords = split.flatten("train")
    test_coords = split.flatten("test")
    train_x = _patches_for(cube12, train_coords, cfg.patch_size, input_hw)
    test_x = _patches_for(cube12, test_coords, cfg.patch_size, input_hw)
    train_y = np.array([cls for _, _, cls in train_coords], dtype=np.int64)
    test_y = np.array([cls for _, _, cls in test_coords], dtype=np.int64)

    if cfg.normalization == "minmax":
        stats = pipeline.minmax_stats(cube12)
    else:
        stats = pipeline.standardize_stats(train_x, cfg.norm_mean, cfg.norm_std)
    train_x = pipeline.normalize(train_x, stats).astype(np.float32)
    test_x = pipeline.normalize(test_x, stats).astype(np.float32)

    pools = {cls: train_x[train_y == cls] for cls in np.unique(train_y)}
    return Dataset(train_x, train_y, test_x, test_y, pools, stats, split,
                   cube12, ratios)


def model_config_from_run(cfg: RunConfig, n_classes: int) -> ModelConfig:
    overrides = dict(token_hw=cfg.token_hw, token_depth=cfg.token_depth,
                     dropout=cfg.dropout)
    if cfg.model_preset == "custom" or cfg.embed_dim is not None:
        overrides.update(embed_dim=cfg.embed_dim or 768,
                         depth=cfg.depth or 12, heads=cfg.heads or 12)
        return preset_config("custom", n_classes, **overrides)
    return preset_config(cfg.model_preset, n_classes, **overrides)


def build_model(cfg: RunConfig, n_classes: int, init: bool = True,
                dtype=np.float32) -> VitModel:
    mc = model_config_from_run(cfg, n_classes)
    rng = _stream(cfg.seed, _STREAM_MODEL) if init else None
    model = VitModel(mc, rng=rng, dtype=dtype)
    if init and cfg.init_checkpoint is not None:
        adapters.load_model_weights(cfg.init_checkpoint, model)
    return model


def attach_from_config(cfg: RunConfig, model: VitModel,
                       init: bool = True) -> adapters.AdapterState:
    rng = _stream(cfg.seed, _STREAM_ADAPTER) if init else None
    return adapters.attach(model, cfg.adapter_spec(), rng=rng)


def evaluate(model: VitModel, x: np.ndarray, y: np.ndarray,
             n_classes: int, batch: int = EVAL_BATCH) -> np.ndarray:
    """Confusion matrix of argmax predictions over (x, y)."""
    preds = np.empty(len(y), dtype=np.int64)
    for start in range(0, len(y), batch):
        logits = model.forward(x[start:start + batch])
        preds[start:start + batch] = np.argmax(logits, axis=-1) + 1
    return metrics.confusion_matrix(y, preds, n_classes)


def predict_map(model: VitModel, cube12: pipeline.HsiCube, patch_size: int,
                input_hw: int = 32, stats: pipeline.NormStats | None = None,
                batch: int = EVAL_BATCH) -> np.ndarray:
    """Class predictions for every labeled pixel; 0 elsewhere."""
    coords = [(int(r), int(c), 0)
              for r, c in np.argwhere(cube12.labels != 0)]
    out = np.zeros(cube12.labels.shape, dtype=np.uint16)
    for start in range(0, len(coords), batch):
        chunk = coords[start:start + batch]
        x = _patches_for(cube12, chunk, patch_size, input_hw)
        if stats is not None:
            x = pipeline.normalize(x, stats).astype(np.float32)
        logits = model.forward(x)
        preds = np.argmax(logits, axis=-1) + 1
        for (r, c, _), p in zip(chunk, preds):
            out[r, c] = p
    return out


@dataclass
class TrainResult:
    best_epoch: int
    best_oa: float
    best_metrics: tuple      # (oa, aa, kappa) at the best epoch
    final_metrics: tuple     # (oa, aa, kappa) at the last epoch
    checkpoint_path: str
    log_path: str
    report_path: str
    losses: list


def run_training(cfg: RunConfig, quiet: bool = False) -> TrainResult:
    os.makedirs(cfg.out_dir, exist_ok=True)
    data = prepare_data(cfg)
    n_classes = data.n_classes
    if cfg.n_classes is not None and cfg.n_classes != n_classes:
        raise pipeline.DataError(
            f"config says {cfg.n_classes} classes but labels contain "
            f"{n_classes}")

    model = build_model(cfg, n_classes)
    state = attach_from_config(cfg, model)
    opt_cfg = OptimizerConfig(base_lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                              eps=cfg.eps, weight_decay=cfg.weight_decay,
                              lr_ratio=cfg.lr_ratio)
    optimizer = make_optimizer(model, state, opt_cfg)

    augmenter = pipeline.Augmenter(
        data.pools,
        pipeline.AugmentConfig(flip_prob=cfg.aug_flip_prob,
                               radiation_prob=cfg.aug_radiation_prob,
                               mixture_prob=cfg.aug_mixture_prob,
                               noise_std=cfg.aug_noise_std))
    # map absolute train index -> position inside its class pool
    pool_pos = np.empty(len(data.train_y), dtype=np.int64)
    for cls in np.unique(data.train_y):
        idx = np.nonzero(data.train_y == cls)[0]
        pool_pos[idx] = np.arange(len(idx))

    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.peft")
    log_path = os.path.join(cfg.out_dir, "training_log.csv")
    report_path = os.path.join(cfg.out_dir, "metrics_report.txt")

    best_oa = -1.0
    best_epoch = -1
    best_metrics = (0.0, 0.0, 0.0)
    final_metrics = (0.0, 0.0, 0.0)
    last_cm = None
    losses = []
    log_lines = ["epoch,loss,oa,aa,kappa"]

    n_train = len(data.train_y)
    for epoch in range(cfg.epochs):
        if cfg.warmup_epochs > 0:
            optimizer.lr_scale = min(1.0, (epoch + 1) / cfg.warmup_epochs)
        order = _stream(cfg.seed, _STREAM_SHUFFLE, epoch).permutation(n_train)
        dropout_rng = (_stream(cfg.seed, _STREAM_DROPOUT, epoch)
                       if model.config.dropout > 0 else None)
        epoch_losses = []
        for bstart in range(0, n_train, cfg.batch_size):
            batch_idx = order[bstart:bstart + cfg.batch_size]
            if cfg.augment:
                xb = np.stack([
                    augmenter.augment(data.train_x[i], int(data.train_y[i]),
                                      pipeline.patch_rng(cfg.seed, epoch, int(i)),
                                      exclude_index=int(pool_pos[i]))
                    for i in batch_idx])
            else:
                xb = data.train_x[batch_idx]
            yb = data.train_y[batch_idx] - 1
            loss = model.loss_and_backward(xb, yb, rng=dropout_rng)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss {loss} at epoch {epoch}, "
                    f"batch {bstart // cfg.batch_size}")
            optimizer.step()
            optimizer.zero_grad()
            epoch_losses.append(loss)
        mean_loss = float(np.mean(epoch_losses))
        losses.append(mean_loss)

        cm = evaluate(model, data.test_x, data.test_y, n_classes)
        last_cm = cm
        epoch_oa = metrics.oa(cm)
        epoch_aa = metrics.aa(cm)
        epoch_kappa = metrics.kappa(cm)
        final_metrics = (epoch_oa, epoch_aa, epoch_kappa)
        log_lines.append(
            f"{epoch},{mean_loss!r},{epoch_oa!r},{epoch_aa!r},{epoch_kappa!r}")
        if not quiet:
            print(f"epoch {epoch:3d}  loss {mean_loss:.4f}  "
                  f"OA {100 * epoch_oa:.2f}%  AA {100 * epoch_aa:.2f}%  "
                  f"kappa {100 * epoch_kappa:.2f}%")
        if epoch_oa > best_oa:
            best_oa = epoch_oa
            best_epoch = epoch
            best_metrics = final_metrics
            if cfg.method == "FFT":
                adapters.save_model(model, ckpt_path)
            else:
                adapters.save_adapters(state, ckpt_path)

    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_lines) + "\n")

    trainable = adapters.count_trainable_params(model, state)
    report = [
        "# training summary",
        f"method = {cfg.method}",
        f"trainable_params = {trainable}",
        "checkpoint_selection = best test OA",
        f"best_epoch = {best_epoch}",
        f"best_oa = {best_metrics[0]!r}",
        f"best_aa = {best_metrics[1]!r}",
        f"best_kappa = {best_metrics[2]!r}",
        f"final_epoch = {cfg.epochs - 1}",
        f"final_oa = {final_metrics[0]!r}",
        f"final_aa = {final_metrics[1]!r}",
        f"final_kappa = {final_metrics[2]!r}",
        "",
        metrics.format_report(last_cm, title="final-epoch test split"),
    ]
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report) + "\n")

    return TrainResult(best_epoch, best_oa, best_metrics, final_metrics,
                       ckpt_path, log_path, report_path, losses)
