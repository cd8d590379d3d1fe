"""Command-line entry point.

Subcommands: gen-data | train | eval | gradcheck | grid. Outputs are CSV
files, PGM mask images, and binary tensor/checkpoint files; every run
directory gets a manifest sufficient to reproduce the run.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical
abort.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import checks
from . import data as datamod
from .config import (ConfigError, apply_pairs, config_from_pairs,
                     config_to_pairs, default_config, parse_config_file,
                     write_manifest)
from .metrics import MetricsReport, evaluate, seed_aggregate
from .network import ParamFormatError
from .trainer import (METHODS, CheckpointState, TrainConfig, TrainingDiverged,
                      build_mapping, checkpoint_load, checkpoint_save, train)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# small writers

def write_pgm(path, labels: np.ndarray, num_levels: int) -> None:
    """8-bit binary PGM with gray levels evenly spread over the label range."""
    if num_levels > 1:
        gray = np.round(labels.astype(np.float64) * 255.0 / (num_levels - 1))
    else:
        gray = np.zeros_like(labels, dtype=np.float64)
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.astype(np.uint8).tobytes())


def _fmt(v: float) -> str:
    return repr(float(v))


def write_epoch_csv(path, history, num_classes: int) -> None:
    cols = ["epoch", "loss_sup", "loss_mi", "loss_orth", "loss_baseline",
            "loss_total", "val_mean_dice"]
    cols += [f"val_dice_class_{k}" for k in range(1, num_classes)]
    cols += ["marginal_entropy", "gram_max_offdiag"]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for st in history:
            row = [str(st.epoch), _fmt(st.loss_sup), _fmt(st.loss_mi),
                   _fmt(st.loss_orth), _fmt(st.loss_baseline),
                   _fmt(st.loss_total), _fmt(st.val_mean_dice)]
            row += [_fmt(st.val_dice_per_class[k]) for k in range(1, num_classes)]
            row += [_fmt(st.marginal_entropy), _fmt(st.gram_max_offdiag)]
            fh.write(",".join(row) + "\n")


def write_report_csv(path, report: MetricsReport) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("key,value\n")
        for key, value in report_items(report):
            fh.write(f"{key},{value}\n")


def report_items(report: MetricsReport):
    yield "mean_dice", _fmt(report.mean_dice)
    for k, v in enumerate(report.dice_per_class):
        yield f"dice_class_{k}", _fmt(v)
    yield "marginal_entropy", _fmt(report.marginal_entropy)
    for k, v in enumerate(report.marginal_over_prototypes):
        yield f"marginal_prototype_{k}", _fmt(v)
    yield "gram_max_offdiag", _fmt(report.gram_max_offdiag)
    yield "gram_diag_deviation", _fmt(report.gram_diag_deviation)


# ---------------------------------------------------------------------------
# flag plumbing

_FLAG_TO_KEY = {
    "method": "method",
    "epochs": "epochs",
    "lr": "lr",
    "momentum": "momentum",
    "num_labeled": "num_labeled",
    "labeled_batch": "labeled_batch",
    "unlabeled_batch": "unlabeled_batch",
    "seed": "seed",
    "mi_on_labeled": "mi_on_labeled",
    "lambda1": "weights.lambda1",
    "lambda2": "weights.lambda2",
    "ramp_fraction": "weights.ramp_fraction",
    "baseline_weight": "weights.baseline_weight",
    "prototypes_per_class": "net.prototypes_per_class",
    "base_channels": "net.base_channels",
    "image_size": "data.image_size",
    "num_images": "data.num_images",
    "num_classes": "data.num_classes",
    "modes_per_class": "data.modes_per_class",
    "noise_sigma": "data.noise_sigma",
    "data_seed": "data.seed",
    "val_images": "data.val_images",
    "test_images": "data.test_images",
}


def _add_config_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", type=Path, help="config file (key = value lines)")
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--num-labeled", type=int, dest="num_labeled")
        p.add_argument("--labeled-batch", type=int, dest="labeled_batch")
        p.add_argument("--unlabeled-batch", type=int, dest="unlabeled_batch")
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)
        p.add_argument("--ramp-fraction", type=float, dest="ramp_fraction")
        p.add_argument("--baseline-weight", type=float, dest="baseline_weight")
        p.add_argument("--prototypes-per-class", type=int, dest="prototypes_per_class")
        p.add_argument("--base-channels", type=int, dest="base_channels")
        p.add_argument("--mi-on-labeled", action="store_const", const=True,
                       dest="mi_on_labeled")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--num-images", type=int, dest="num_images")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--modes-per-class", type=int, dest="modes_per_class")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--val-images", type=int, dest="val_images")
    p.add_argument("--test-images", type=int, dest="test_images")


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then config-file values, then explicit flags."""
    cfg = default_config()
    if getattr(args, "config", None) is not None:
        cfg = apply_pairs(cfg, parse_config_file(args.config), origin=str(args.config))
    flag_pairs = {}
    for attr, key in _FLAG_TO_KEY.items():
        value = getattr(args, attr, None)
        if value is not None:
            flag_pairs[key] = ("true" if value is True else
                               "false" if value is False else str(value))
    return apply_pairs(cfg, flag_pairs, origin="flags")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    spec = cfg.data
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".writable"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    split_idx = datamod.split(spec, cfg.num_labeled, split_seed=cfg.seed)
    for i in range(spec.num_images):
        sample = datamod.render_sample(spec, i)
        datamod.save_tensor_file(out / f"image_{i:04d}.sseg", sample.image)
        datamod.save_tensor_file(out / f"mask_{i:04d}.sseg", sample.mask)
    with open(out / "split.txt", "w", encoding="ascii", newline="\n") as fh:
        fh.write("labeled: " + " ".join(map(str, split_idx.labeled_ids)) + "\n")
        fh.write("unlabeled: " + " ".join(map(str, split_idx.unlabeled_ids)) + "\n")
    print(f"wrote {spec.num_images} images + masks and split.txt to {out}")
    return EXIT_OK


def _run_dir(args, cfg: TrainConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(f"run_{cfg.method}_n{cfg.num_labeled}_s{cfg.seed}")


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = _run_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    resume = checkpoint_load(args.resume) if args.resume else None
    started = time.time()
    result = train(cfg, resume=resume)
    duration = time.time() - started
    resolved = result.config

    write_epoch_csv(out / "metrics.csv", result.history, resolved.net.num_classes)
    checkpoint_save(out / "run.ckpt", result.final_params, result.opt_state,
                    result.teacher, epoch=resolved.epochs, seed=resolved.seed,
                    best_params=result.best_params, best_epoch=result.best_epoch,
                    best_val_dice=result.best_val_dice)
    test_set = datamod.test_samples(resolved.data)
    report = evaluate(result.best_params, result.mapping, test_set, resolved.net)
    write_report_csv(out / "test_report.csv", report)
    write_manifest(out / "manifest.txt", cfg, {
        "version": __version__,
        "command": "train",
        "duration_seconds": f"{duration:.3f}",
        "metrics_csv": "metrics.csv",
        "checkpoint": "run.ckpt",
        "test_report_csv": "test_report.csv",
    })
    print(f"method={resolved.method} best_epoch={result.best_epoch} "
          f"best_val_dice={result.best_val_dice:.4f} test_mean_dice={report.mean_dice:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = build_config(args)
    state = checkpoint_load(args.checkpoint)
    params = state.params if args.use_final else (state.best_params or state.params)
    resolved = cfg.resolve()
    expected = (resolved.net.feature_dim, resolved.net.num_prototypes)
    if tuple(params.head.data.shape) != expected:
        raise UsageError(
            f"checkpoint head shape {tuple(params.head.data.shape)} does not match "
            f"configured (feature_dim, prototypes) {expected}; "
            "check --num-classes/--prototypes-per-class/--base-channels")
    mapping = build_mapping(resolved.net.num_classes, resolved.net.prototypes_per_class)
    spec = resolved.data
    split_samples = {
        "train": lambda: datamod.train_samples(spec),
        "val": lambda: datamod.val_samples(spec),
        "test": lambda: datamod.test_samples(spec),
    }[args.split]()
    report = evaluate(params, mapping, split_samples, resolved.net)
    for key, value in report_items(report):
        print(f"{key} = {value}")
    out = Path(args.out) if args.out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / f"eval_{args.split}.csv", report)
    if args.dump_masks:
        from .autodiff import Tensor
        from .network import predict
        for i, sample in enumerate(split_samples):
            _, _, hard_over, hard = predict(params, mapping,
                                            Tensor(sample.image[None]))
            write_pgm(out / f"{args.split}_{i:04d}_true.pgm", sample.mask,
                      resolved.net.num_classes)
            write_pgm(out / f"{args.split}_{i:04d}_pred.pgm", hard[0],
                      resolved.net.num_classes)
            write_pgm(out / f"{args.split}_{i:04d}_over.pgm", hard_over[0],
                      resolved.net.num_prototypes)
        print(f"wrote {3 * len(split_samples)} PGM files to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = checks.run_suite(step=args.step, tolerance=args.tolerance)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    print(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed "
          f"(tolerance {args.tolerance:g})")
    if failed:
        print("failing: " + ", ".join(r.op_name for r in failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _grid_one(pairs: dict[str, str]) -> dict:
    """One grid cell: train, then evaluate the best params on the test split."""
    cfg = config_from_pairs(pairs, origin="grid")
    result = train(cfg)
    resolved = result.config
    report = evaluate(result.best_params, result.mapping,
                      datamod.test_samples(resolved.data), resolved.net)
    return {"test_dice": report.mean_dice,
            "marginal_entropy": report.marginal_entropy,
            "gram_max_offdiag": report.gram_max_offdiag,
            "report": report}


def _grid_worker(job):
    method, num_labeled, seed, pairs = job
    try:
        cell = _grid_one(pairs)
        return method, num_labeled, seed, cell, None
    except Exception as exc:  # record and continue with the other cells
        return method, num_labeled, seed, None, f"{type(exc).__name__}: {exc}"


DEFAULT_GRID_METHODS = ("baseline", "variant1", "variant2", "variant3",
                        "variant4", "variant5", "ours", "entropy_min",
                        "pseudo_label", "mean_teacher")


GRID_DEFAULT_EPOCHS = 30


def cmd_grid(args) -> int:
    base = build_config(args)
    if args.epochs is None:
        file_pairs = (parse_config_file(args.config)
                      if getattr(args, "config", None) else {})
        if "epochs" not in file_pairs:
            # desk-scale default: full-length runs would blow the grid budget
            base = apply_pairs(base, {"epochs": str(GRID_DEFAULT_EPOCHS)})
    methods = args.methods.split(",") if args.methods else list(DEFAULT_GRID_METHODS)
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r} in --methods")
    labeled_counts = ([int(x) for x in args.labeled_counts.split(",")]
                      if args.labeled_counts else [4, 8])
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else [1, 2, 3]
    out = Path(args.out) if args.out is not None else Path("grid_out")
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for method in methods:
        for n in labeled_counts:
            for seed in seeds:
                pairs = config_to_pairs(base)
                pairs.update({"method": method, "num_labeled": str(n),
                              "seed": str(seed)})
                jobs.append((method, n, seed, pairs))

    started = time.time()
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_grid_worker, jobs))
    else:
        outcomes = [_grid_worker(j) for j in jobs]
    duration = time.time() - started

    cells: dict[tuple, list] = {}
    for method, n, seed, cell, error in outcomes:
        cells.setdefault((method, n), []).append((seed, cell, error))
        if error is not None:
            print(f"grid cell {method}/n{n}/seed{seed} failed: {error}",
                  file=sys.stderr)

    path = out / "summary.csv"
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("method,num_labeled,seeds,mean_test_dice,std_test_dice,"
                 "mean_marginal_entropy,mean_gram_max_offdiag\n")
        for method in methods:
            for n in labeled_counts:
                entries = cells.get((method, n), [])
                good = [(s, c) for s, c, e in entries if e is None]
                seeds_str = ";".join(str(s) for s, _ in good)
                if good:
                    reports = [c["report"] for _, c in good]
                    mean_r, std_r = seed_aggregate(reports)
                    row = [method, str(n), seeds_str,
                           _fmt(mean_r.mean_dice), _fmt(std_r.mean_dice),
                           _fmt(mean_r.marginal_entropy),
                           _fmt(mean_r.gram_max_offdiag)]
                else:
                    row = [method, str(n), "", "nan", "nan", "nan", "nan"]
                fh.write(",".join(row) + "\n")
    write_manifest(out / "manifest.txt", base, {
        "version": __version__,
        "command": "grid",
        "duration_seconds": f"{duration:.3f}",
        "methods": ";".join(methods),
        "labeled_counts": ";".join(map(str, labeled_counts)),
        "grid_seeds": ";".join(map(str, seeds)),
        "summary_csv": "summary.csv",
    })
    print(f"grid of {len(jobs)} runs finished in {duration:.1f}s; summary in {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoseg",
        description="Multi-prototype semi-supervised segmentation lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as SSEG files")
    _add_config_flags(p, training=False)
    p.add_argument("--num-labeled", type=int, dest="num_labeled")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method")
    _add_config_flags(p)
    p.add_argument("--out")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--dump-masks", action="store_true")
    p.add_argument("--use-final", action="store_true",
                   help="evaluate final instead of best-validation parameters")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("grid", help="methods x labeled-counts x seeds experiment grid")
    _add_config_flags(p)
    p.add_argument("--methods", help="comma list; default: the ablation/comparison lineup")
    p.add_argument("--labeled-counts", dest="labeled_counts", help="comma list (default 4,8)")
    p.add_argument("--seeds", help="comma list (default 1,2,3)")
    p.add_argument("--jobs", type=int, default=1, help="parallel sub-runs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParamFormatError,
            datamod.TensorFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
