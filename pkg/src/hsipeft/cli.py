"""Command-line harness.

Subcommands: synth, train, eval, fuse, count-params, sweep-lambda, map.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

Heavy imports happen inside main() so --threads can pin the BLAS thread
count before numpy loads; results are deterministic for a fixed count.
"""

from __future__ import annotations

import argparse
import colorsys
import os
import sys
import warnings

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsipeft",
        description="Parameter-efficient fine-tuning of a spectral "
                    "transformer for hyperspectral classification.")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (fixed count => fixed results)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed")
        p.add_argument("--out", default=None, help="override the output dir")
        return p

    add("synth", "write a synthetic .hsic/.hsgt pair")
    add("train", "train, evaluate per epoch, write checkpoint + logs")
    p = add("eval", "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p = add("fuse", "fold adapters into base weights; write full model")
    p.add_argument("--checkpoint", required=True)
    add("count-params", "report trainable parameters and adapter storage")
    p = add("sweep-lambda", "one training run per lambda; CSV of results")
    p.add_argument("--lambdas", required=True,
                   help="comma-separated lambda values")
    p = add("map", "render a classification map as binary PPM")
    p.add_argument("--checkpoint", required=True)
    return parser


def _load_config(args):
    from .config import ConfigError, load_config
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    try:
        return load_config(args.config, overrides)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc.filename}") from exc


def cmd_synth(cfg) -> int:
    from . import pipeline
    if cfg.synth_h is None:
        raise_config("synth command needs synth_* keys in [data]")
    cube = pipeline.synth_cube(cfg.synth_h, cfg.synth_w, cfg.synth_bands,
                               cfg.synth_classes, cfg.synth_noise_std,
                               cfg.synth_seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    cube_path = os.path.join(cfg.out_dir, "synth.hsic")
    label_path = os.path.join(cfg.out_dir, "synth.hsgt")
    pipeline.write_cube(cube_path, cube.reflectance)
    pipeline.write_labels(label_path, cube.labels)
    print(f"wrote {cube_path} ({cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]})")
    print(f"wrote {label_path} ({cube.n_classes} classes)")
    return 0


def raise_config(message: str):
    from .config import ConfigError
    raise ConfigError(message)


def cmd_train(cfg) -> int:
    from .config import dump_config
    from .train import run_training
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "resolved_config.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    result = run_training(cfg)
    print(f"best epoch {result.best_epoch}: OA {100 * result.best_oa:.2f}%")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def _load_model_for_eval(cfg, checkpoint, n_classes):
    from . import adapters
    from .train import build_model
    method = adapters.checkpoint_method(checkpoint)
    if method == "FFT":
        model = build_model(cfg, n_classes, init=False)
        adapters.load_model_weights(checkpoint, model)
        return model, None
    model = build_model(cfg, n_classes)  # frozen base comes from the run seed
    state = adapters.load_adapters(checkpoint, model)
    return model, state


def cmd_eval(cfg, checkpoint) -> int:
    from . import metrics
    from .train import evaluate, prepare_data
    data = prepare_data(cfg)
    model, _ = _load_model_for_eval(cfg, checkpoint, data.n_classes)
    cm = evaluate(model, data.test_x, data.test_y, data.n_classes)
    report = metrics.format_report(cm, title=f"eval of {checkpoint}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "eval_report.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report)
    print(report, end="")
    return 0


def cmd_fuse(cfg, checkpoint) -> int:
    from . import adapters
    from .train import build_model, prepare_data
    data = prepare_data(cfg)
    model, state = _load_model_for_eval(cfg, checkpoint, data.n_classes)
    if state is None:
        raise_config("checkpoint already holds a full model; nothing to fuse")
    adapters.fuse(model, state)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "fused_model.peft")
    adapters.save_model(model, path)
    print(f"wrote {path}")
    return 0


def cmd_count(cfg) -> int:
    from . import adapters
    from .train import build_model
    n_classes = cfg.n_classes
    if n_classes is None:
        raise_config("count-params needs n_classes in [model]")
    model = build_model(cfg, n_classes, init=False)
    state = adapters.attach(model, cfg.adapter_spec(), rng=None)
    trainable = adapters.count_trainable_params(model, state)
    storage = adapters.adapter_storage_bytes(state)
    print(f"method = {cfg.method}")
    print(f"n_classes = {n_classes}")
    print(f"trainable_params = {trainable}")
    print(f"trainable_params_millions = {trainable / 1e6:.3f}")
    print(f"adapter_storage_bytes = {storage}")
    print(f"adapter_storage_mb = {storage / 1e6:.6f}")
    print(f"adapter_storage_mib = {storage / 2**20:.6f}")
    return 0


def cmd_sweep_lambda(cfg, lambdas_arg: str) -> int:
    from .adapters import PLUS_METHODS
    from .train import run_training
    if cfg.method not in PLUS_METHODS:
        raise_config(f"sweep-lambda needs a Plus method, got {cfg.method}")
    values = []
    for tok in lambdas_arg.split(","):
        tok = tok.strip()
        if tok:
            values.append(float(tok))
    if not values:
        raise_config("lambda list is empty")
    unique = sorted(set(values))
    if len(unique) != len(values):
        warnings.warn("duplicate lambda values removed from sweep")
    import copy
    rows = ["lambda,oa,aa,kappa"]
    base_out = cfg.out_dir
    for lam in unique:
        sub = copy.copy(cfg)
        sub.lr_ratio = lam
        sub.out_dir = os.path.join(base_out, f"lambda_{lam:g}")
        result = run_training(sub, quiet=True)
        oa_v, aa_v, kappa_v = result.best_metrics
        rows.append(f"{lam:g},{oa_v!r},{aa_v!r},{kappa_v!r}")
        print(f"lambda {lam:g}: OA {100 * oa_v:.2f}%")
    os.makedirs(base_out, exist_ok=True)
    path = os.path.join(base_out, "lambda_sweep.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {path}")
    return 0


def class_palette(n_classes: int):
    """Class i (1-based) -> RGB via evenly spaced hues; class 0 is black."""
    colors = [(0, 0, 0)]
    for i in range(n_classes):
        r, g, b = colorsys.hsv_to_rgb(i / n_classes, 1.0, 1.0)
        colors.append((round(255 * r), round(255 * g), round(255 * b)))
    return colors


def write_ppm(path, rgb) -> None:
    import numpy as np
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def cmd_map(cfg, checkpoint) -> int:
    import numpy as np

    from .train import predict_map, prepare_data
    data = prepare_data(cfg)
    model, _ = _load_model_for_eval(cfg, checkpoint, data.n_classes)
    preds = predict_map(model, data.cube12, cfg.patch_size, stats=data.stats)
    palette = np.array(class_palette(data.n_classes), dtype=np.uint8)
    rgb = palette[preds]
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "classification_map.ppm")
    write_ppm(path, rgb)
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .adapters import CheckpointError
    from .config import ConfigError
    from .optim import NumericalError
    from .pipeline import DataError

    try:
        cfg = _load_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "fuse":
            return cmd_fuse(cfg, args.checkpoint)
        if args.command == "count-params":
            return cmd_count(cfg)
        if args.command == "sweep-lambda":
            return cmd_sweep_lambda(cfg, args.lambdas)
        if args.command == "map":
            return cmd_map(cfg, args.checkpoint)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
