"""``sfanet`` command-line interface.

Subcommands: gen-data, train, eval, infer, bench, gradcheck. Every config
default can be overridden with a flag of the same dotted name, e.g.
``--train.base_lr 0.02`` or ``--model.lambdas 0,0,0,0``.

Exit codes: 0 success, 1 usage/configuration error, 2 check or
verification failure (gradient check, weights CRC, unfolded bench).
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import weights
from .checks import format_table, run_suite
from .config import ConfigError, RunConfig, dumps_toml, leaf_fields, load_config
from .data import (
    ConfusionMatrix,
    DiskSceneSet,
    NetpbmError,
    UnfoldedModelError,
    bench_fps,
    read_manifest,
    read_ppm,
    write_dataset,
    write_pgm,
)
from .data import miou as mean_iou
from .network import SfanetConfig, SfanetModel, fold_batch_norm, predict
from .training import TrainingDiverged, _cast, evaluate, new_state, prepare_images, train_loop

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2
METRICS_LOG = "metrics.log"


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which we reserve for check failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _out(line: str = "") -> None:
    print(line, flush=True)


def _fmt_record(record: dict) -> str:
    """One metrics-log line: ``key=value`` pairs, floats in round-trip repr."""
    parts = []
    for k, v in record.items():
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def parse_metrics_log(path) -> tuple[dict[str, str], list[dict]]:
    """-> (header fields, records). Header lines are ``# key: value``."""
    header, records = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(":")
            header[key.strip()] = value.strip()
            continue
        rec = {}
        for tok in line.split():
            k, _, v = tok.partition("=")
            rec[k] = int(v) if k == "iter" else float(v)
        records.append(rec)
    return header, records


def _checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:06d}.sfaw"


def _load_weights(path):
    if not Path(path).exists():
        raise UsageError(f"weights file not found: {path}")
    return weights.load_model(path)


def _check_classes(meta: dict, config: RunConfig) -> None:
    stored = meta["model"]["num_classes"]
    if stored != config.model.num_classes:
        raise UsageError(
            f"class-count mismatch: weights have {stored} classes, config has model.num_classes={config.model.num_classes}"
        )


def _input_mean(meta: dict, config: RunConfig) -> tuple[float, float, float]:
    if meta.get("mean") is not None:
        return tuple(meta["mean"])
    if config.train.augment.mean is not None:
        return config.train.augment.mean
    raise UsageError("weights carry no input mean; set --train.augment.mean")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: RunConfig, args) -> int:
    root = Path(args.out or config.paths.dataset_dir)
    if (root / "manifest.json").exists() or (root.exists() and any(root.iterdir())):
        if not args.force:
            raise UsageError(f"{root} already exists and is not empty; pass --force to overwrite")
        for sub in ("images", "masks"):
            shutil.rmtree(root / sub, ignore_errors=True)
        (root / "manifest.json").unlink(missing_ok=True)
    manifest = write_dataset(root, config.data.scene, config.data.count, config.data.val_count)
    _out(f"wrote {manifest['count']} scenes to {root}")
    for split, (lo, hi) in manifest["splits"].items():
        _out(f"  {split}: {hi - lo} (indices {lo}..{hi - 1})")
    _out(f"  mean: {manifest['mean']}")
    return EXIT_OK


def _open_dataset(config: RunConfig, split: str) -> DiskSceneSet:
    root = Path(config.paths.dataset_dir)
    try:
        manifest = read_manifest(root)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc}; run `sfanet gen-data` first") from None
    classes = manifest["scene_spec"]["num_classes"]
    if classes != config.model.num_classes:
        raise UsageError(f"config/model mismatch: dataset has {classes} classes, model.num_classes={config.model.num_classes}")
    if split not in manifest["splits"]:
        raise UsageError(f"dataset has no split {split!r} (have {sorted(manifest['splits'])})")
    return DiskSceneSet(root, split)


def cmd_train(config: RunConfig, args) -> int:
    train_set = _open_dataset(config, "train")
    val_set = _open_dataset(config, "val")
    val_set = val_set if len(val_set) else None
    if len(train_set) == 0:
        raise UsageError("training split is empty")
    train_cfg = config.train
    if train_cfg.augment.mean is None:
        mean = tuple(float(v) for v in train_set.manifest["mean"])
        train_cfg = replace(train_cfg, augment=replace(train_cfg.augment, mean=mean))
    out_dir = Path(config.paths.checkpoint_dir)
    log_path = out_dir / METRICS_LOG

    if args.resume:
        model, meta, iteration, momentum = _load_weights(args.resume)
        if SfanetConfig(**meta["model"]) != config.model:
            raise UsageError("config/model mismatch: --resume checkpoint was trained with a different model section")
        if iteration is None:
            raise UsageError(f"{args.resume} holds weights only (no optimizer state) and cannot be resumed")
        state = new_state(model, train_cfg)
        state.iteration = iteration
        state.schedule.current_iter = iteration
        state.optimizer.buffers.update({k: v.copy() for k, v in momentum.items()})
        mode = "a"
        if log_path.exists():
            # drop records past the checkpoint so the resumed log has one line per iteration
            kept = [
                line for line in log_path.read_text().splitlines(keepends=True)
                if line.startswith("#") or not line.strip() or int(line.split()[0].partition("=")[2]) < iteration
            ]
            log_path.write_text("".join(kept))
    else:
        if log_path.exists() and not args.force:
            raise UsageError(f"{out_dir} already holds a run; pass --force to overwrite or --resume CKPT")
        model = SfanetModel(config.model)
        state = new_state(model, train_cfg)
        mode = "w"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.toml").write_text(dumps_toml(replace(config, train=train_cfg)))
    extra_meta = {"mean": list(train_cfg.augment.mean)}

    with open(log_path, mode) as log:
        def header(key, value):
            log.write(f"# {key}: {value}\n")

        if mode == "w":
            header("run", "sfanet train")
            header("lambdas", tuple(state.lambdas))
            header("total_iters", train_cfg.total_iters)
            header("base_lr", repr(train_cfg.base_lr))
            header("seed", train_cfg.seed)
            header("mean", tuple(train_cfg.augment.mean))
            header("parameters", model.num_parameters())
        else:
            header("resumed_at", state.iteration)
        log.flush()

        def on_record(rec):
            log.write(_fmt_record(rec) + "\n")
            log.flush()
            if "val_miou" in rec or rec["iter"] % max(1, train_cfg.total_iters // 20) == 0:
                _out(_fmt_record({k: (round(v, 5) if isinstance(v, float) else v) for k, v in rec.items()}))

        def on_checkpoint(st):
            weights.save_checkpoint(out_dir / _checkpoint_name(st.iteration), model, st, extra_meta)

        if state.iteration >= train_cfg.total_iters:
            _out(f"checkpoint is already at iteration {state.iteration} of {train_cfg.total_iters}; nothing to do")
            return EXIT_OK
        try:
            state = train_loop(model, train_set, train_cfg, val_set, state, on_record, on_checkpoint)
        except TrainingDiverged as exc:
            header("diverged", str(exc))
            raise CheckFailure(f"training diverged: {exc}") from exc
    final = out_dir / "final.sfaw"
    weights.save_checkpoint(final, model, state, extra_meta)
    _out(f"wrote {final}")
    return EXIT_OK


def cmd_eval(config: RunConfig, args) -> int:
    model, meta, _, _ = _load_weights(args.weights)
    _check_classes(meta, config)
    dataset = _open_dataset(config, args.split)
    mean = _input_mean(meta, config)
    model.eval()
    if not model.folded:
        model = fold_batch_norm(model)
    cm: ConfusionMatrix = evaluate(model, dataset, mean)
    ious = cm.class_iou()
    _out(f"split: {args.split} ({len(dataset)} images)")
    _out(f"{'class':>5}  {'iou':>8}")
    for c, v in enumerate(ious):
        _out(f"{c:>5}  {v:>8.4f}")
    _out(f"mIoU: {mean_iou(cm):.4f}")
    return EXIT_OK


def cmd_infer(config: RunConfig, args) -> int:
    model, meta, _, _ = _load_weights(args.weights)
    try:
        image = read_ppm(args.image)
    except (OSError, NetpbmError) as exc:
        raise UsageError(f"cannot read {args.image}: {exc}") from None
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise UsageError(
            f"image extents {h}x{w} are not divisible by 32; pad to {-(-h // 32) * 32}x{-(-w // 32) * 32}"
        )
    model.eval()
    if not model.folded:
        model = fold_batch_norm(model)
    x = prepare_images(image[None], _input_mean(meta, config))
    mask = predict(model, _cast(x, model))[0]
    write_pgm(args.output, mask)
    counts = np.bincount(mask.reshape(-1), minlength=model.config.num_classes)
    _out(f"wrote {args.output} ({h}x{w}); class pixel counts: {counts.tolist()}")
    return EXIT_OK


def cmd_bench(config: RunConfig, args) -> int:
    if args.weights:
        model = _load_weights(args.weights)[0]
    else:
        model = SfanetModel(config.model)
    model.eval()
    if not args.unfolded and not model.folded:
        model = fold_batch_norm(model)
    try:
        report = bench_fps(model, config.bench.extents, config.bench.warmup, config.bench.iters, seed=config.train.seed)
    except UnfoldedModelError as exc:
        raise CheckFailure(str(exc)) from exc
    for line in report.lines():
        _out(line)
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, args) -> int:
    rows = run_suite(seed=config.train.seed, names=args.only or None)
    if args.only and not rows:
        raise UsageError(f"no checks named {args.only}")
    for line in format_table(rows):
        _out(line)
    failed = [r.report.name for r in rows if not r.report.passed]
    _out(f"{len(rows) - len(failed)}/{len(rows)} passed")
    if failed:
        raise CheckFailure(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run configuration")
    g.add_argument("--config", help="TOML run configuration")
    g.add_argument("--seed", type=int, help="sets model.seed, train.seed and data.scene.seed")
    g.add_argument("--force", action="store_true", help="overwrite existing outputs")
    g.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    o = common.add_argument_group("config overrides (dotted names, same as the TOML keys)")
    for key in leaf_fields(RunConfig):
        o.add_argument(f"--{key}", dest=f"set:{key}", metavar="VALUE", default=argparse.SUPPRESS)

    parser = _Parser(prog="sfanet", description="SFANet segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic scene dataset")
    p.add_argument("--out", help="dataset directory (default: paths.dataset_dir)")

    p = sub.add_parser("train", parents=[common], help="train and write checkpoints + metrics log")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    p = sub.add_parser("eval", parents=[common], help="per-class IoU and mIoU of a checkpoint")
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("infer", parents=[common], help="segment one PPM image into a PGM mask")
    p.add_argument("--weights", required=True)
    p.add_argument("image")
    p.add_argument("output")

    p = sub.add_parser("bench", parents=[common], help="inference latency / FPS of the BN-folded model")
    p.add_argument("--weights", help="checkpoint (default: freshly initialized model.* config)")
    p.add_argument("--unfolded", action="store_true", help="skip BN folding (the measurement then refuses)")

    p = sub.add_parser("gradcheck", parents=[common], help="float64 finite-difference gradient suite")
    p.add_argument("--only", nargs="*", metavar="NAME", help="run only these checks")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {k[len("set:"):]: v for k, v in vars(args).items() if k.startswith("set:")}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        for key in ("model.seed", "train.seed", "data.scene.seed"):
            overrides.setdefault(key, str(args.seed))
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        if args.print_config:
            sys.stdout.write(dumps_toml(config))
            return EXIT_OK
        return COMMANDS[args.command](config, args)
    except (UsageError, ConfigError) as exc:
        print(f"sfanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckFailure, weights.WeightsFileError) as exc:
        print(f"sfanet {args.command}: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
