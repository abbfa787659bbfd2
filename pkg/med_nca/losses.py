"""Segmentation losses (Dice + BCE) and Dice evaluation."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from med_nca.engine.tape import Tape, Var
from med_nca.errors import ShapeError

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


def _as_var(prob: Var | np.ndarray) -> Var:
    if isinstance(prob, Var):
        return prob
    array = np.asarray(prob)
    dtype = array.dtype if array.dtype in (np.float32, np.float64) else np.float64
    return Tape(dtype=dtype, record=False).constant(array)


def _check_target(prob: Var, target: np.ndarray, op: str) -> np.ndarray:
    target = np.asarray(target)
    if target.shape != prob.shape:
        raise ShapeError(f"{op}: prediction shape {prob.shape} does not match target {target.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ShapeError(f"{op}: target must be binary")
    return target.astype(prob.value.dtype)


def dice_loss(prob: Var | np.ndarray, target: np.ndarray, eps: float = 1e-6) -> Var:
    """1 - (2·Σpt + eps) / (Σp + Σt + eps), differentiable in ``prob``."""
    prob = _as_var(prob)
    t = _check_target(prob, target, "dice_loss")
    p = prob.value
    inter = float((p * t).sum())
    denom = float(p.sum()) + float(t.sum()) + eps
    numer = 2.0 * inter + eps
    out = np.asarray(1.0 - numer / denom, dtype=p.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = -(2.0 * t * denom - numer) / (denom * denom)
        return ((g * grad).astype(p.dtype),)

    return prob.tape.emit("dice_loss", out, (prob,), backward, saved=(p,))


def bce_loss(prob: Var | np.ndarray, target: np.ndarray) -> Var:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    prob = _as_var(prob)
    t = _check_target(prob, target, "bce_loss")
    p = prob.value
    clipped = np.clip(p.astype(np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    count = p.size
    per_pixel = -(t * np.log(clipped) + (1.0 - t) * np.log1p(-clipped))
    out = np.asarray(per_pixel.mean(), dtype=p.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
        grad = -(t / clipped - (1.0 - t) / (1.0 - clipped)) / count
        return ((g * grad * inside).astype(p.dtype),)

    return prob.tape.emit("bce_loss", out, (prob,), backward, saved=(p,))


def dice_score(pred_mask: np.ndarray, target: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|) on binary masks; 1.0 when both are empty."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(target).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"dice_score: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class EvalReport:
    """Per-image Dice with mean ± std (population std)."""

    per_image_dice: list[float]
    names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.names:
            self.names = [f"image_{i:04d}" for i in range(len(self.per_image_dice))]
        if len(self.names) != len(self.per_image_dice):
            raise ShapeError("EvalReport: names and scores differ in length")

    @property
    def n_images(self) -> int:
        return len(self.per_image_dice)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_image_dice)) if self.per_image_dice else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.per_image_dice)) if self.per_image_dice else math.nan

    def as_dict(self) -> dict[str, float | int]:
        return {"n_images": self.n_images, "mean": self.mean, "std": self.std}

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            handle.write(f"# n_images={self.n_images},mean={self.mean!r},std={self.std!r}\n")
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["image", "dice"])
            for name, score in zip(self.names, self.per_image_dice):
                writer.writerow([name, repr(float(score))])
        logger.info(f"Wrote eval report ({self.n_images} images, mean Dice {self.mean:.4f}) to {path}")
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> tuple["EvalReport", dict[str, float]]:
        """Load a report and the aggregates stored in its header line."""
        lines = Path(path).read_text().splitlines()
        header: dict[str, float] = {}
        if lines and lines[0].startswith("#"):
            for item in lines[0][1:].strip().split(","):
                key, _, value = item.partition("=")
                header[key.strip()] = float(value)
            lines = lines[1:]
        rows = list(csv.reader(lines))[1:]
        return cls([float(r[1]) for r in rows], [r[0] for r in rows]), header
