#!/usr/bin/env python3
"""Med-NCA harness - dataset generation, training, inference and robustness experiments."""

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from functools import wraps
from pathlib import Path
from typing import Any, Callable

from dotenv import load_dotenv

from med_nca import settings
from med_nca.backbone import PRESETS, NcaConfig, param_count
from med_nca.errors import DivergenceError, MedNcaError
from med_nca.perturb import AXES, KINDS

logger = logging.getLogger(__name__)

COMMANDS: dict[str, Callable[..., dict[str, Any]]] = {}

KIND_NAMES = ", ".join(KINDS)


def command(func: Callable[..., dict[str, Any]]) -> Callable[..., dict[str, Any]]:
    """Register ``cmd_<name>`` and turn library errors into an error result."""

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> dict[str, Any]:
        try:
            return func(*args, **kwargs)
        except DivergenceError as e:
            logger.warning(f"Training diverged: {e}")
            return {"status": "error", "error": str(e)}
        except (MedNcaError, OSError) as e:
            logger.error(f"{func.__name__} failed: {e}")
            return {"status": "error", "error": str(e)}

    COMMANDS[func.__name__.removeprefix("cmd_").replace("_", "-")] = wrapper
    return wrapper


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


def _load_manifest(data: str | Path):
    from med_nca.synth import DatasetManifest

    path = Path(data)
    if path.is_dir():
        path = path / "manifest.tsv"
    return DatasetManifest.read(path)


def _workers(workers: int | None) -> int:
    return workers if workers is not None else settings.worker_count()


# ============================================================================
# DATA
# ============================================================================


@command
def cmd_gen_data(out: str, seed: int = 0, count: int = 250, size: int = 128, workers: int | None = None) -> dict[str, Any]:
    """Write a synthetic PGM dataset with a manifest."""
    from med_nca.synth import SynthSpec, generate_dataset, split_counts

    spec = SynthSpec(seed=seed, count=count, height=size, width=size)
    manifest = generate_dataset(spec, out, settings.DATASET_SPLITS, workers=_workers(workers))
    return {
        "status": "success",
        "manifest": str(Path(out) / "manifest.tsv"),
        "count": len(manifest.rows),
        "splits": split_counts(count, settings.DATASET_SPLITS),
    }


# ============================================================================
# TRAINING
# ============================================================================


def train_defaults() -> dict[str, object]:
    from med_nca.trainer import TrainConfig

    return {**asdict(NcaConfig()), "scale_factor": 4, **asdict(TrainConfig())}


def resolve_train_settings(config: str | None = None, **overrides: object) -> dict[str, object]:
    """Built-ins, then MEDNCA_THREADS, then the ``key=value`` file, then flags."""
    layers: list[dict[str, object | None]] = [{"workers": settings.worker_count()}]
    if config:
        layers.append(settings.read_config_file(config))
    layers.append(overrides)
    return settings.merge_settings(train_defaults(), *layers)


@command
def cmd_train(data: str, out: str, config: str | None = None, **overrides: object) -> dict[str, Any]:
    """Fit a Med-NCA model; writes ``best.ckpt`` and ``history.csv`` to ``out``."""
    from med_nca.checkpoint import save_checkpoint
    from med_nca.pipeline import MedNcaModel
    from med_nca.trainer import TrainConfig, fit

    values = resolve_train_settings(config, **overrides)
    nca_config = NcaConfig(**{k: values[k] for k in asdict(NcaConfig())})
    train_config = TrainConfig(**{k: values[k] for k in asdict(TrainConfig())})

    manifest = _load_manifest(data)
    train_set = manifest.load_split("train")
    val_set = manifest.load_split("val")
    if not train_set:
        return {"status": "error", "error": f"train split of {data} is empty"}
    if not val_set:
        logger.warning("Validation split is empty; selecting the checkpoint on the training set")
        val_set = train_set

    out_dir = Path(out)
    ckpt_path = out_dir / "best.ckpt"
    model = MedNcaModel.create(nca_config, seed=train_config.seed, scale_factor=int(values["scale_factor"]))
    for sample in train_set:
        sample.validate(model.scale_factor)
    logger.info(
        f"Training {model.param_count} parameters on {len(train_set)} samples "
        f"({train_config.epochs} epochs, batch {train_config.batch_size}, {train_config.workers} workers)"
    )

    result = fit(
        model,
        train_set,
        val_set,
        train_config,
        out_dir=out_dir,
        on_improve=lambda best, epoch: save_checkpoint(best, ckpt_path),
    )
    save_checkpoint(result.model, ckpt_path)
    return {
        "status": "success",
        "checkpoint": str(ckpt_path),
        "history": str(out_dir / "history.csv"),
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_dice": _finite_or_none(result.best_val_dice),
        "stopped_early": result.stopped_early,
    }


# ============================================================================
# INFERENCE & EVALUATION
# ============================================================================


@command
def cmd_infer(
    ckpt: str,
    image: str,
    out_mask: str,
    out_prob: str | None = None,
    threshold: float = 0.5,
    fire_rate: float | None = None,
    seed: int = 0,
) -> dict[str, Any]:
    """Segment one PGM image at full resolution."""
    from med_nca.checkpoint import load_checkpoint
    from med_nca.pgm import read_pgm, write_pgm
    from med_nca.pipeline import infer

    model = load_checkpoint(ckpt)
    pixels = read_pgm(image)
    result = infer(model, pixels[None], seed, threshold=threshold, fire_rate=fire_rate)
    write_pgm(out_mask, result.mask[0], "mask")
    response: dict[str, Any] = {
        "status": "success",
        "mask": out_mask,
        "height": int(pixels.shape[0]),
        "width": int(pixels.shape[1]),
        "foreground_fraction": float(result.mask.mean()),
    }
    if out_prob:
        write_pgm(out_prob, result.prob[0].clip(0.0, 1.0), "image")
        response["prob"] = out_prob
    return response


@command
def cmd_eval(
    ckpt: str,
    data: str,
    split: str = "test",
    out: str | None = None,
    seed: int = 0,
    fire_rate: float | None = None,
    workers: int | None = None,
) -> dict[str, Any]:
    """Per-image Dice over a split, written as an EvalReport CSV."""
    from med_nca.checkpoint import load_checkpoint
    from med_nca.losses import EvalReport
    from med_nca.trainer import evaluate_dice

    model = load_checkpoint(ckpt)
    samples = _load_manifest(data).load_split(split)
    if not samples:
        return {"status": "error", "error": f"split {split!r} of {data} is empty"}
    scores = evaluate_dice(model, samples, seed, fire_rate=fire_rate, workers=_workers(workers))
    report = EvalReport(scores, [s.name for s in samples])
    out_path = Path(out) if out else Path(ckpt).with_name(f"eval_{split}.csv")
    report.write_csv(out_path)
    return {"status": "success", "report": str(out_path), "split": split, **report.as_dict()}


@command
def cmd_sweep(
    ckpt: str,
    data: str,
    kind: str,
    out: str | None = None,
    severity_grid: list[float] | None = None,
    seed: int = 0,
    axis: str = "vertical",
    split: str = "test",
    fire_rate: float | None = None,
    workers: int | None = None,
) -> dict[str, Any]:
    """Dice under one perturbation kind (or ``all``) over a severity grid."""
    from med_nca.checkpoint import load_checkpoint
    from med_nca.sweep import run_sweep

    if kind != "all" and kind not in KINDS:
        return {"status": "error", "error": f"Unknown perturbation kind: {kind}. Must be one of {list(KINDS)} or 'all'"}
    if kind == "all" and severity_grid:
        return {"status": "error", "error": "--severity-grid needs a single --kind"}
    kinds = list(KINDS) if kind == "all" else [kind]

    model = load_checkpoint(ckpt)
    samples = _load_manifest(data).load_split(split)
    if not samples:
        return {"status": "error", "error": f"split {split!r} of {data} is empty"}
    grids = {kind: severity_grid} if severity_grid else None
    report = run_sweep(model, samples, kinds, grids, seed=seed, axis=axis, fire_rate=fire_rate, workers=_workers(workers))
    out_path = Path(out) if out else Path(ckpt).with_name(f"sweep_{kind}.csv")
    report.write_csv(out_path)
    return {"status": "success", "report": str(out_path), "rows": len(report.rows), "summary": report.summary()}


# ============================================================================
# BENCHMARKS
# ============================================================================


@command
def cmd_bench(ckpt: str | None = None, size_grid: list[int] | None = None, out: str = "bench.csv") -> dict[str, Any]:
    """Parameter count, activation counts and timings per image size."""
    from med_nca.bench import run_bench, write_bench_csv
    from med_nca.checkpoint import load_checkpoint
    from med_nca.pipeline import MedNcaModel

    model = load_checkpoint(ckpt) if ckpt else MedNcaModel.create(NcaConfig(), seed=0)
    sizes = size_grid or [64, 128]
    bad = [s for s in sizes if s % model.scale_factor]
    if bad:
        return {"status": "error", "error": f"sizes {bad} not divisible by scale factor {model.scale_factor}"}
    rows = run_bench(model, sizes)
    write_bench_csv(rows, out)
    return {"status": "success", "report": out, "rows": [asdict(r) for r in rows]}


@command
def cmd_params() -> dict[str, Any]:
    """Per-backbone and total parameter counts for the model presets."""
    from med_nca.checkpoint import checkpoint_size

    rows = []
    for name, dims in PRESETS.items():
        per_backbone = param_count(dims["n"], dims["h"])
        rows.append(
            {
                "preset": name,
                "n": dims["n"],
                "h": dims["h"],
                "backbone": per_backbone,
                "total": 2 * per_backbone,
                "checkpoint_bytes": checkpoint_size(dims["n"], dims["h"]),
            }
        )
    return {"status": "success", "presets": rows}


# ============================================================================
# CLI
# ============================================================================


def _float_list(raw: str) -> list[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}")


def _int_list(raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="med-nca", description=__doc__)
    parser.add_argument("--log-level", default=None, help="overrides MEDNCA_LOG_LEVEL (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("train", help="train a model, writing best.ckpt and history.csv")
    p.add_argument("--data", required=True, help="dataset directory or manifest.tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value run file; flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--fire-rate", type=float)
    p.add_argument("--scale-factor", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("infer", help="segment one PGM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-prob")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--fire-rate", type=float)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="per-image Dice on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fire-rate", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("sweep", help="Dice under increasingly severe perturbations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, help=f"one of {KIND_NAMES}, or all")
    p.add_argument("--severity-grid", type=_float_list)
    p.add_argument("--axis", choices=AXES, default="vertical")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fire-rate", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("bench", help="activation accounting per image size")
    p.add_argument("--ckpt")
    p.add_argument("--size-grid", type=_int_list)
    p.add_argument("--out", default="bench.csv")

    sub.add_parser("params", help="parameter counts of the model presets")
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = vars(build_parser().parse_args(argv))
    name = args.pop("command")
    try:
        level = settings.log_level(args.pop("log_level"))
    except MedNcaError as e:
        print(json.dumps({"status": "error", "error": str(e)}))
        return 1
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    result = COMMANDS[name](**args)
    print(json.dumps(result, indent=2, default=str))
    return 0 if result.get("status") == "success" else 1


if __name__ == "__main__":
    sys.exit(main())
