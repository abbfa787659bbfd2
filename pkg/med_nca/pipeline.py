"""Two-stage Med-NCA: low-resolution global rollout, lift, high-resolution refinement.

Training runs stage 2 on a random patch the size of the downscaled image and
backpropagates through both stages. Inference runs stage 2 on the whole image.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from med_nca.backbone import BackboneParams, NcaConfig, init_params, param_count, rollout
from med_nca.engine import ops
from med_nca.engine.tape import Tape, Var
from med_nca.errors import ShapeError
from med_nca.losses import bce_loss, dice_loss

logger = logging.getLogger(__name__)

LOGIT_CHANNEL = 1
MIN_SIDE = 8


@dataclass
class MedNcaModel:
    """Two backbones sharing (n, h): b1 for the downscaled image, b2 for full resolution."""

    b1: BackboneParams
    b2: BackboneParams
    config: NcaConfig
    scale_factor: int = 4

    def __post_init__(self) -> None:
        if self.scale_factor < 2:
            raise ShapeError(f"scale_factor must be >= 2, got {self.scale_factor}")
        for params in (self.b1, self.b2):
            params.validate()
            if (params.n, params.h) != (self.config.n, self.config.h):
                raise ShapeError(
                    f"backbone is n={params.n}, h={params.h} but config says n={self.config.n}, h={self.config.h}"
                )

    @classmethod
    def create(cls, config: NcaConfig, seed: int, scale_factor: int = 4, dtype: np.dtype | type = np.float32) -> "MedNcaModel":
        seed_b1, seed_b2 = np.random.SeedSequence(seed).generate_state(2)
        return cls(
            b1=init_params(config, int(seed_b1), dtype),
            b2=init_params(config, int(seed_b2), dtype),
            config=config,
            scale_factor=scale_factor,
        )

    @property
    def dtype(self) -> np.dtype:
        return self.b1.conv1_w.dtype

    @property
    def param_count(self) -> int:
        return 2 * param_count(self.config.n, self.config.h)

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat view ``{"b1.conv1_w": array, ...}`` in serialisation order."""
        flat = {f"b1.{k}": v for k, v in self.b1.arrays().items()}
        flat.update({f"b2.{k}": v for k, v in self.b2.arrays().items()})
        return flat

    def with_parameters(self, flat: dict[str, np.ndarray]) -> "MedNcaModel":
        b1 = BackboneParams(**{k: flat[f"b1.{k}"] for k in BackboneParams.FIELDS})
        b2 = BackboneParams(**{k: flat[f"b2.{k}"] for k in BackboneParams.FIELDS})
        return MedNcaModel(b1, b2, self.config, self.scale_factor)

    def copy(self) -> "MedNcaModel":
        return MedNcaModel(self.b1.copy(), self.b2.copy(), self.config, self.scale_factor)

    def astype(self, dtype: np.dtype | type) -> "MedNcaModel":
        return MedNcaModel(self.b1.astype(dtype), self.b2.astype(dtype), self.config, self.scale_factor)

    def bind(self, tape: Tape) -> tuple[dict[str, Var], dict[str, Var]]:
        return self.b1.bind(tape, "b1."), self.b2.bind(tape, "b2.")


@dataclass
class TrainSample:
    """Image in [0, 1] and binary mask, both 1×H×W."""

    image: np.ndarray
    mask: np.ndarray
    name: str = ""

    def validate(self, scale_factor: int | None = None) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ShapeError(f"image must be 1×H×W, got {self.image.shape}")
        if self.mask.shape != self.image.shape:
            raise ShapeError(f"mask shape {self.mask.shape} does not match image {self.image.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ShapeError(f"mask of {self.name or 'sample'} is not binary")
        if scale_factor is not None:
            _, h, w = self.image.shape
            if h % scale_factor or w % scale_factor:
                raise ShapeError(f"image size {h}×{w} is not divisible by scale factor {scale_factor}")


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    sample_losses: list[float] = field(default_factory=list)
    stored_activations: int = 0


@dataclass
class InferResult:
    mask: np.ndarray
    prob: np.ndarray
    peak_live: int = 0


def derive_seeds(rng_seed: int, *keys: int, count: int = 3) -> list[int]:
    """Independent integer seeds for (stage-1 mask, stage-2 mask, patch position)."""
    return [int(s) for s in np.random.SeedSequence([rng_seed, *keys]).generate_state(count, dtype=np.uint64)]


# ============================================================================
# STAGE BUILDING BLOCKS
# ============================================================================


def seed_state(image: np.ndarray, n: int) -> np.ndarray:
    """n×H×W state: image in the leading channels, zeros elsewhere."""
    if image.ndim != 3 or image.shape[0] >= n:
        raise ShapeError(f"seed_state: image shape {image.shape} does not fit an {n}-channel state")
    state = np.zeros((n,) + image.shape[1:], dtype=image.dtype)
    state[: image.shape[0]] = image
    return state


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Average-area pooling by an integer factor."""
    _, h, w = image.shape
    if h % factor or w % factor:
        raise ShapeError(f"image size {h}×{w} is not divisible by scale factor {factor}")
    return ops.resample_array(image, h // factor, w // factor, "average")


def _stage1(tape: Tape, b1: dict[str, Var], config: NcaConfig, image_lo: np.ndarray, seed: int, fire_rate: float) -> Var:
    state = tape.constant(seed_state(image_lo.astype(tape.dtype), config.n))
    return rollout(state, b1, config.steps, fire_rate, seed)


def stage1(model: MedNcaModel, image_lowres: np.ndarray, rng_seed: int, fire_rate: float | None = None) -> np.ndarray:
    """Roll b1 out for ``config.steps`` on the seeded low-resolution state."""
    tape = Tape(dtype=model.dtype, record=False)
    b1, _ = model.bind(tape)
    rate = model.config.fire_rate if fire_rate is None else fire_rate
    return _stage1(tape, b1, model.config, image_lowres, rng_seed, rate).value


def lift_state(state_lo: np.ndarray, image_hi: np.ndarray, mode: str = "nearest") -> np.ndarray:
    """Upscale all channels to the image size, then put the full-resolution image in channel 0."""
    _, h, w = state_lo.shape
    _, big_h, big_w = image_hi.shape
    if big_h % h or big_w % w:
        raise ShapeError(f"lift_state: {h}×{w} state does not divide {big_h}×{big_w} image")
    tape = Tape(dtype=state_lo.dtype, record=False)
    return ops.upscale_imprint(tape.constant(state_lo), image_hi, mode=mode).value


# ============================================================================
# TRAINING
# ============================================================================


def _patch_forward(tape: Tape, model: MedNcaModel, sample: TrainSample, rng_seed: int, lift_mode: str) -> tuple[Var, np.ndarray]:
    """Stage 1 on the whole downscaled image, stage 2 on one random patch."""
    f = model.scale_factor
    config = model.config
    sample.validate(f)
    _, height, width = sample.image.shape
    patch_h, patch_w = height // f, width // f
    if patch_h > height or patch_w > width:
        raise ShapeError(f"patch {patch_h}×{patch_w} larger than image {height}×{width}")

    seed_lo, seed_hi, seed_patch = derive_seeds(rng_seed)
    b1, b2 = model.bind(tape)
    image = sample.image.astype(tape.dtype)

    state_lo = _stage1(tape, b1, config, downsample(image, f), seed_lo, config.fire_rate)

    rng = np.random.default_rng(seed_patch)
    top = int(rng.integers(0, height - patch_h + 1))
    left = int(rng.integers(0, width - patch_w + 1))
    patch = ops.upscale_imprint(state_lo, image, (top, left, patch_h, patch_w), mode=lift_mode)
    patch = rollout(patch, b2, config.steps, config.fire_rate, seed_hi, origin=(top, left))

    prob = ops.sigmoid(ops.channel(patch, LOGIT_CHANNEL))
    target = sample.mask[:, top : top + patch_h, left : left + patch_w]
    return prob, target


def sample_loss(tape: Tape, model: MedNcaModel, sample: TrainSample, rng_seed: int, lift_mode: str = "nearest") -> Var:
    """Dice + BCE of one sample's patch prediction, recorded on ``tape``."""
    prob, target = _patch_forward(tape, model, sample, rng_seed, lift_mode)
    return ops.add(dice_loss(prob, target), bce_loss(prob, target))


def predict_patch(
    model: MedNcaModel,
    sample: TrainSample,
    rng_seed: int,
    lift_mode: str = "nearest",
) -> tuple[np.ndarray, np.ndarray]:
    """(probability, target) on the patch ``sample_loss`` would train on for ``rng_seed``."""
    tape = Tape(dtype=model.dtype, record=False)
    prob, target = _patch_forward(tape, model, sample, rng_seed, lift_mode)
    return prob.value, target


def _sample_loss_and_grads(model: MedNcaModel, sample: TrainSample, rng_seed: int, lift_mode: str) -> tuple[float, dict[str, np.ndarray], int]:
    tape = Tape(dtype=model.dtype)
    loss = sample_loss(tape, model, sample, rng_seed, lift_mode)
    grads = tape.backward(loss)
    return loss.item(), grads, tape.accountant.stored


def train_step(
    model: MedNcaModel,
    batch: list[TrainSample],
    rng_seed: int,
    workers: int = 1,
    lift_mode: str = "nearest",
) -> StepResult:
    """Mean loss and gradients over ``batch``; each sample gets its own tape.

    Per-sample results are reduced in batch order, so the result does not
    depend on ``workers``.
    """
    if not batch:
        raise ShapeError("train_step needs a non-empty batch")
    jobs = [(model, sample, derive_seeds(rng_seed, i, count=1)[0], lift_mode) for i, sample in enumerate(batch)]
    if workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _sample_loss_and_grads(*job), jobs))
    else:
        results = [_sample_loss_and_grads(*job) for job in jobs]

    losses = [r[0] for r in results]
    grads = {name: np.zeros_like(value) for name, value in model.parameters().items()}
    for _, sample_grads, _ in results:
        for name, g in sample_grads.items():
            grads[name] += g
    for name in grads:
        grads[name] /= len(batch)
    return StepResult(
        loss=float(np.mean(losses)),
        grads=grads,
        sample_losses=losses,
        stored_activations=sum(r[2] for r in results),
    )


# ============================================================================
# INFERENCE
# ============================================================================


def infer(
    model: MedNcaModel,
    image: np.ndarray,
    rng_seed: int,
    threshold: float = 0.5,
    fire_rate: float | None = None,
    lift_mode: str = "nearest",
) -> InferResult:
    """Full-image prediction without patches; keeps only the current state per step.

    Sizes not divisible by the scale factor are reflect-padded up to the next
    multiple and the outputs cropped back.
    """
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != model.config.img_channels:
        raise ShapeError(f"infer: expected {model.config.img_channels}×H×W image, got {image.shape}")
    f = model.scale_factor
    config = model.config
    rate = config.fire_rate if fire_rate is None else fire_rate
    _, height, width = image.shape
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ShapeError(f"infer: image {height}×{width} smaller than {MIN_SIDE}×{MIN_SIDE}")
    pad_h, pad_w = (-height) % f, (-width) % f
    padded = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect") if pad_h or pad_w else image

    seed_lo, seed_hi, _ = derive_seeds(rng_seed)
    tape = Tape(dtype=model.dtype, record=False)
    b1, b2 = model.bind(tape)
    padded = padded.astype(tape.dtype)

    state_lo = _stage1(tape, b1, config, downsample(padded, f), seed_lo, rate)
    state = ops.upscale_imprint(state_lo, padded, mode=lift_mode)
    tape.free(state_lo)
    state = rollout(state, b2, config.steps, rate, seed_hi)
    prob = ops.sigmoid(ops.channel(state, LOGIT_CHANNEL)).value[:, :height, :width]
    return InferResult(mask=prob > threshold, prob=prob, peak_live=tape.accountant.peak_live)
