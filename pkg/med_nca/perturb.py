"""Input-invariance transforms and synthetic MRI acquisition artefacts.

Geometric transforms (scale, shape, translate) move the mask with the image.
Artefacts (ghosting, anisotropy, bias field) change the image only.
"""

import logging
from dataclasses import dataclass

import numpy as np

from med_nca.engine.ops import resample_array
from med_nca.errors import ConfigError, ShapeError
from med_nca.pipeline import MIN_SIDE, TrainSample
from med_nca.settings import GHOSTING_NUM_GHOSTS

logger = logging.getLogger(__name__)

GEOMETRIC_KINDS = ("scale", "shape", "translate")
ARTEFACT_KINDS = ("ghosting", "anisotropy", "bias_field")
KINDS = GEOMETRIC_KINDS + ARTEFACT_KINDS
AXES = ("vertical", "horizontal")

GHOST_PROTECTED_FRACTION = 0.06

# identity severity per kind
IDENTITY = {"scale": 1.0, "shape": 1.0, "translate": 0.0, "ghosting": 0.0, "anisotropy": 1, "bias_field": 0.0}

_RANGES = {
    "scale": (0.5, 2.0),
    "shape": (0.5, 2.0),
    "translate": (0.0, 0.5),
    "ghosting": (0.0, 1.0),
    "anisotropy": (1, 8),
    "bias_field": (0.0, 1.0),
}


@dataclass(frozen=True)
class PerturbSpec:
    """A named perturbation at one severity.

    ``translate`` severity is a fraction of the side length along ``axis``.
    """

    kind: str
    severity: float
    axis: str = "vertical"
    seed: int = 0
    num_ghosts: int = GHOSTING_NUM_GHOSTS

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"Unknown perturbation kind: {self.kind}. Must be one of {list(KINDS)}")
        if self.axis not in AXES:
            raise ConfigError(f"Unknown axis: {self.axis}. Must be one of {list(AXES)}")
        lo, hi = _RANGES[self.kind]
        if not lo <= self.severity <= hi:
            raise ConfigError(f"{self.kind} severity {self.severity} outside [{lo}, {hi}]")
        if self.kind == "anisotropy" and float(self.severity) != int(self.severity):
            raise ConfigError(f"anisotropy factor must be an integer, got {self.severity}")
        if self.kind == "ghosting" and self.num_ghosts < 2:
            raise ConfigError(f"num_ghosts must be >= 2, got {self.num_ghosts}")

    @property
    def is_identity(self) -> bool:
        return self.severity == IDENTITY[self.kind]


def _axis_index(axis: str) -> int:
    if axis not in AXES:
        raise ConfigError(f"Unknown axis: {axis}. Must be one of {list(AXES)}")
    return 1 if axis == "vertical" else 2


def _round_to_multiple(value: float, multiple: int = 4) -> int:
    return max(multiple, int(round(value / multiple)) * multiple)


def _resize(sample: TrainSample, out_h: int, out_w: int) -> TrainSample:
    if out_h < MIN_SIDE or out_w < MIN_SIDE:
        raise ShapeError(f"perturbed size {out_h}×{out_w} smaller than {MIN_SIDE}×{MIN_SIDE}")
    image = np.clip(resample_array(sample.image, out_h, out_w, "bilinear"), 0.0, 1.0)
    mask = resample_array(sample.mask, out_h, out_w, "nearest")
    return TrainSample(image=image, mask=mask, name=sample.name)


# ============================================================================
# GEOMETRIC
# ============================================================================


def apply_scale(sample: TrainSample, ratio: float) -> TrainSample:
    """Resize both axes by ``ratio`` (rounded to multiples of 4)."""
    if ratio <= 0:
        raise ConfigError(f"scale ratio must be > 0, got {ratio}")
    _, h, w = sample.image.shape
    if ratio == 1:
        return TrainSample(sample.image.copy(), sample.mask.copy(), sample.name)
    return _resize(sample, _round_to_multiple(ratio * h), _round_to_multiple(ratio * w))


def apply_shape(sample: TrainSample, ratio: float, axis: str = "vertical") -> TrainSample:
    """Stretch a single axis by ``ratio``."""
    if ratio <= 0:
        raise ConfigError(f"shape ratio must be > 0, got {ratio}")
    _, h, w = sample.image.shape
    if ratio == 1:
        return TrainSample(sample.image.copy(), sample.mask.copy(), sample.name)
    if _axis_index(axis) == 1:
        return _resize(sample, _round_to_multiple(ratio * h), w)
    return _resize(sample, h, _round_to_multiple(ratio * w))


def _shift(array: np.ndarray, offset: int, axis_index: int) -> np.ndarray:
    out = np.zeros_like(array)
    length = array.shape[axis_index]
    src = [slice(None)] * array.ndim
    dst = [slice(None)] * array.ndim
    if offset >= 0:
        src[axis_index] = slice(0, length - offset)
        dst[axis_index] = slice(offset, length)
    else:
        src[axis_index] = slice(-offset, length)
        dst[axis_index] = slice(0, length + offset)
    out[tuple(dst)] = array[tuple(src)]
    return out


def apply_translate(sample: TrainSample, offset: int, axis: str = "vertical") -> TrainSample:
    """Shift content by ``offset`` pixels; vacated cells become 0, content leaving is dropped."""
    axis_index = _axis_index(axis)
    length = sample.image.shape[axis_index]
    if abs(offset) >= length:
        raise ShapeError(f"translation {offset} not smaller than side length {length}")
    return TrainSample(
        image=_shift(sample.image, int(offset), axis_index),
        mask=_shift(sample.mask, int(offset), axis_index),
        name=sample.name,
    )


# ============================================================================
# ARTEFACTS
# ============================================================================


def apply_ghosting(image: np.ndarray, num_ghosts: int, intensity: float, axis: str = "vertical", seed: int = 0) -> np.ndarray:
    """Attenuate every ``num_ghosts``-th frequency line along ``axis`` by (1 - intensity).

    The DC term and the central 6% of the spectrum are left alone. ``seed`` is
    accepted for a uniform artefact signature; the artefact is deterministic.
    """
    if num_ghosts < 2:
        raise ConfigError(f"num_ghosts must be >= 2, got {num_ghosts}")
    if not 0.0 <= intensity <= 1.0:
        raise ConfigError(f"ghosting intensity must be in [0, 1], got {intensity}")
    axis_index = _axis_index(axis) - (3 - image.ndim)
    length = image.shape[axis_index]
    freqs = np.rint(np.fft.fftfreq(length) * length).astype(np.int64)
    protected = np.abs(freqs) <= GHOST_PROTECTED_FRACTION * length / 2
    lines = (freqs % num_ghosts == 0) & ~protected
    gains = np.where(lines, 1.0 - intensity, 1.0)
    shape = [1] * image.ndim
    shape[axis_index] = length
    spectrum = np.fft.fft(image.astype(np.float64), axis=axis_index) * gains.reshape(shape)
    out = np.real(np.fft.ifft(spectrum, axis=axis_index))
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def apply_anisotropy(image: np.ndarray, factor: int, axis: str = "vertical") -> np.ndarray:
    """Average blocks of ``factor`` cells along ``axis``, then bilinear back to full size.

    A trailing partial block is averaged over the cells it has.
    """
    factor = int(factor)
    if factor < 1:
        raise ConfigError(f"anisotropy factor must be >= 1, got {factor}")
    arr = image[None] if image.ndim == 2 else image
    axis_index = _axis_index(axis)
    length = arr.shape[axis_index]
    if factor == 1:
        return image.copy()
    starts = np.arange(0, length, factor)
    sizes = np.diff(np.append(starts, length))
    pooled = np.add.reduceat(arr.astype(np.float64), starts, axis=axis_index)
    shape = [1] * arr.ndim
    shape[axis_index] = starts.size
    pooled = pooled / sizes.reshape(shape)
    _, h, w = arr.shape
    out = resample_array(pooled, h, w, "bilinear")
    out = out.astype(image.dtype)
    return out[0] if image.ndim == 2 else out


def bias_field(height: int, width: int, magnitude: float, seed: int = 0) -> np.ndarray:
    """exp of a random degree-3 polynomial in normalized coordinates u, v ∈ [-1, 1]."""
    if magnitude < 0:
        raise ConfigError(f"bias field magnitude must be >= 0, got {magnitude}")
    rng = np.random.default_rng(seed)
    u = np.linspace(-1.0, 1.0, width)[None, :]
    v = np.linspace(-1.0, 1.0, height)[:, None]
    log_field = np.zeros((height, width))
    for i in range(4):
        for j in range(4 - i):
            if i == 0 and j == 0:
                continue
            coefficient = rng.uniform(-magnitude, magnitude)
            log_field = log_field + coefficient * u**i * v**j
    return np.exp(log_field)


def apply_bias_field(image: np.ndarray, magnitude: float, seed: int = 0) -> np.ndarray:
    """Multiply by a smooth positive bias field and clamp to [0, 1]."""
    field = bias_field(image.shape[-2], image.shape[-1], magnitude, seed)
    return np.clip(image * field, 0.0, 1.0).astype(image.dtype)


# ============================================================================
# DISPATCH
# ============================================================================


def apply_perturbation(sample: TrainSample, spec: PerturbSpec) -> TrainSample:
    """Apply ``spec`` to a sample; artefacts leave the mask untouched.

    Identity severities return an unmodified copy, so a sweep's identity row
    reproduces the unperturbed evaluation exactly.
    """
    if spec.is_identity:
        return TrainSample(sample.image.copy(), sample.mask.copy(), sample.name)
    if spec.kind == "scale":
        return apply_scale(sample, spec.severity)
    if spec.kind == "shape":
        return apply_shape(sample, spec.severity, spec.axis)
    if spec.kind == "translate":
        side = sample.image.shape[_axis_index(spec.axis)]
        return apply_translate(sample, int(round(spec.severity * side)), spec.axis)
    if spec.kind == "ghosting":
        image = apply_ghosting(sample.image, spec.num_ghosts, spec.severity, spec.axis, spec.seed)
    elif spec.kind == "anisotropy":
        image = apply_anisotropy(sample.image, int(spec.severity), spec.axis)
    else:
        image = apply_bias_field(sample.image, spec.severity, spec.seed)
    return TrainSample(image=image, mask=sample.mask, name=sample.name)
