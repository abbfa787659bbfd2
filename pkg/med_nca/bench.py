"""Activation accounting and size benchmarks.

Stored activation scalars stand in for training VRAM; peak live scalars
during a non-recording rollout stand in for inference memory.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from med_nca.backbone import NcaConfig, init_params, nca_step
from med_nca.engine import ops
from med_nca.engine.tape import Tape
from med_nca.losses import bce_loss, dice_loss
from med_nca.pipeline import LOGIT_CHANNEL, MedNcaModel, TrainSample, infer, sample_loss

logger = logging.getLogger(__name__)

_GRID_SIDE = 8


def step_cost_per_cell(config: NcaConfig, dtype: np.dtype | type = np.float32) -> float:
    """Scalars one recorded update step saves per grid cell."""
    tape = Tape(dtype=dtype)
    params = init_params(config, 0, dtype).bind(tape)
    state = tape.constant(np.zeros((config.n, _GRID_SIDE, _GRID_SIDE)))
    nca_step(state, params, config.fire_rate, 0, 0)
    return tape.accountant.stored / _GRID_SIDE**2


def loss_cost_per_cell(config: NcaConfig, dtype: np.dtype | type = np.float32) -> float:
    """Scalars the sigmoid + Dice + BCE head saves per grid cell."""
    tape = Tape(dtype=dtype)
    state = tape.parameter("state", np.zeros((config.n, _GRID_SIDE, _GRID_SIDE)))
    prob = ops.sigmoid(ops.channel(state, LOGIT_CHANNEL))
    target = np.zeros(prob.shape)
    ops.add(dice_loss(prob, target), bce_loss(prob, target))
    return tape.accountant.stored / _GRID_SIDE**2


def naive_training_activations(config: NcaConfig, height: int, width: int, steps: int, dtype: np.dtype | type = np.float32) -> int:
    """Stored scalars of a hypothetical single-stage full-resolution rollout of ``steps`` steps."""
    per_cell = steps * step_cost_per_cell(config, dtype) + loss_cost_per_cell(config, dtype)
    return int(round(height * width * per_cell))


def training_activations(model: MedNcaModel, height: int, width: int, seed: int = 0) -> int:
    """Stored scalars of one recorded two-stage training forward pass on an H×W sample."""
    rng = np.random.default_rng(seed)
    sample = TrainSample(
        image=rng.uniform(0.0, 1.0, size=(1, height, width)).astype(np.float32),
        mask=(rng.uniform(size=(1, height, width)) > 0.5).astype(np.float32),
    )
    tape = Tape(dtype=model.dtype)
    sample_loss(tape, model, sample, seed)
    return tape.accountant.stored


def inference_peak(model: MedNcaModel, height: int, width: int, seed: int = 0) -> int:
    image = np.random.default_rng(seed).uniform(0.0, 1.0, size=(1, height, width)).astype(np.float32)
    return infer(model, image, seed).peak_live


@dataclass
class BenchRow:
    size: int
    param_count: int
    inference_peak_live: int
    training_stored: int
    naive_training_stored: int
    training_ratio: float
    infer_seconds: float
    train_forward_seconds: float


def memory_claim(model: MedNcaModel, height: int, width: int) -> dict[str, float]:
    """Med-NCA training activations against a full-resolution model with 2s steps."""
    stored = training_activations(model, height, width)
    naive = naive_training_activations(model.config, height, width, 2 * model.config.steps, model.dtype)
    return {"training_stored": stored, "naive_training_stored": naive, "ratio": naive / stored}


def run_bench(model: MedNcaModel, sizes: list[int]) -> list[BenchRow]:
    rows = []
    for size in sizes:
        start = time.perf_counter()
        peak = inference_peak(model, size, size)
        infer_seconds = time.perf_counter() - start

        start = time.perf_counter()
        claim = memory_claim(model, size, size)
        train_seconds = time.perf_counter() - start

        rows.append(
            BenchRow(
                size=size,
                param_count=model.param_count,
                inference_peak_live=peak,
                training_stored=int(claim["training_stored"]),
                naive_training_stored=int(claim["naive_training_stored"]),
                training_ratio=claim["ratio"],
                infer_seconds=infer_seconds,
                train_forward_seconds=train_seconds,
            )
        )
        logger.info(f"bench {size}×{size}: peak_live={peak} training ratio={claim['ratio']:.2f}")
    return rows


def write_bench_csv(rows: list[BenchRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(BenchRow.__dataclass_fields__), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
    return path
