"""Optimization loop: Adam, step-decay schedule, clipping, early stopping, history."""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from med_nca.errors import ConfigError, DivergenceError, NonFiniteError, ShapeError
from med_nca.losses import dice_score
from med_nca.pipeline import MedNcaModel, TrainSample, derive_seeds, infer, predict_patch, train_step

logger = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_loss", "val_dice", "lr"]


@dataclass
class OptimState:
    """Adam moments, one pair per parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: float = 0.25
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    patience: int = 30
    clip_norm: float = 1.0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 < self.lr_decay_every <= 1:
            raise ConfigError(f"lr_decay_every must be in (0, 1], got {self.lr_decay_every}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0 (0 disables), got {self.clip_norm}")


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptimState,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """Bias-corrected Adam update; returns new parameter arrays and the advanced state."""
    for name, value in params.items():
        if name not in grads or grads[name].shape != value.shape:
            got = grads[name].shape if name in grads else None
            raise ShapeError(f"gradient for {name} has shape {got}, expected {value.shape}")

    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t

    updated: dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads[name]
        m = opt.first_moment.get(name)
        v = opt.second_moment.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        opt.first_moment[name] = m
        opt.second_moment[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        updated[name] = (value - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps_opt)).astype(value.dtype)
    return updated, opt


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    factor = max_norm / (total + 1e-12)
    return {name: (g * factor).astype(g.dtype) for name, g in grads.items()}, total


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Halve (by default) every ``lr_decay_every`` of the total epochs."""
    period = max(1, int(round(config.lr_decay_every * config.epochs)))
    return config.lr * config.lr_decay_factor ** (epoch // period)


def image_seed(seed: int, index: int) -> int:
    """Inference seed of the ``index``-th image of an evaluation set."""
    return derive_seeds(seed, index, count=1)[0]


def score_sample(model: MedNcaModel, sample: TrainSample, rng_seed: int, fire_rate: float | None = None) -> float:
    result = infer(model, sample.image, rng_seed, fire_rate=fire_rate)
    return dice_score(result.mask, sample.mask > 0.5)


def evaluate_dice(
    model: MedNcaModel,
    samples: list[TrainSample],
    seed: int,
    fire_rate: float | None = None,
    workers: int = 1,
) -> list[float]:
    """Full-image Dice for each sample, in sample order."""
    jobs = [(sample, image_seed(seed, i)) for i, sample in enumerate(samples)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda job: score_sample(model, job[0], job[1], fire_rate), jobs))
    return [score_sample(model, sample, s, fire_rate) for sample, s in jobs]


def patch_dice(model: MedNcaModel, samples: list[TrainSample], seed: int, threshold: float = 0.5) -> list[float]:
    """Dice on the random training-size patch of each sample, as seen during training."""
    scores = []
    for i, sample in enumerate(samples):
        prob, target = predict_patch(model, sample, image_seed(seed, i))
        scores.append(dice_score(prob > threshold, target > 0.5))
    return scores


@dataclass
class FitResult:
    model: MedNcaModel
    history: list[dict[str, float]]
    best_epoch: int
    best_val_dice: float
    stopped_early: bool = False


def _write_history(path: Path, history: list[dict[str, float]]) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for row in history:
            writer.writerow([int(row["epoch"]), repr(row["train_loss"]), repr(row["val_dice"]), repr(row["lr"])])


def fit(
    model: MedNcaModel,
    train_set: list[TrainSample],
    val_set: list[TrainSample],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    on_improve: Callable[[MedNcaModel, int], None] | None = None,
) -> FitResult:
    """Train with shuffled mini-batches, keeping the model with the best validation Dice.

    ``on_improve(model, epoch)`` is called whenever a new best is found.
    """
    if not train_set or not val_set:
        raise ShapeError("fit needs non-empty train and validation sets")
    history: list[dict[str, float]] = []
    history_path = None
    if out_dir is not None:
        history_path = Path(out_dir) / "history.csv"
        history_path.parent.mkdir(parents=True, exist_ok=True)
        _write_history(history_path, history)

    if config.epochs == 0:
        return FitResult(model=model, history=history, best_epoch=-1, best_val_dice=math.nan)

    opt = OptimState(lr=config.lr)
    params = {name: value.copy() for name, value in model.parameters().items()}
    current = model.with_parameters(params)
    best_model = current.copy()
    best_dice = -math.inf
    best_epoch = -1
    stale = 0
    stopped_early = False

    for epoch in range(config.epochs):
        opt.lr = lr_at(config, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        losses: list[float] = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            step_seed = derive_seeds(config.seed, epoch, b, count=1)[0]
            try:
                result = train_step(current, batch, step_seed, workers=config.workers)
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite activation at epoch {epoch}, batch {b}: {e}") from e
            if not math.isfinite(result.loss):
                raise DivergenceError(f"loss became {result.loss} at epoch {epoch}, batch {b} (lr={opt.lr})")
            grads, grad_norm = clip_global_norm(result.grads, config.clip_norm)
            params, opt = adam_step(params, grads, opt)
            current = current.with_parameters(params)
            losses.append(result.loss)
            logger.debug(f"epoch {epoch} batch {b}: loss={result.loss:.5f} grad_norm={grad_norm:.4f}")

        val_dice = float(np.mean(evaluate_dice(current, val_set, config.seed, workers=config.workers)))
        train_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_dice": val_dice, "lr": opt.lr})
        if history_path is not None:
            _write_history(history_path, history)
        logger.info(f"epoch {epoch}: train_loss={train_loss:.5f} val_dice={val_dice:.4f} lr={opt.lr:.2e}")

        if val_dice > best_dice:
            best_dice, best_epoch, stale = val_dice, epoch, 0
            best_model = current.copy()
            if on_improve is not None:
                on_improve(best_model, epoch)
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                logger.warning(f"Early stop at epoch {epoch}: no val Dice gain for {stale} epochs")
                stopped_early = True
                break

    return FitResult(
        model=best_model,
        history=history,
        best_epoch=best_epoch,
        best_val_dice=best_dice,
        stopped_early=stopped_early,
    )
