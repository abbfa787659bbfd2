"""Backbone NCA: parameters, initialisation, the asynchronous update step and rollout."""

import logging
from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np

from med_nca.engine import ops
from med_nca.engine.tape import Tape, Var
from med_nca.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

PRESETS: dict[str, dict[str, int]] = {
    "standard": {"n": 32, "h": 128},
    "small": {"n": 16, "h": 128},
    "narrow_hidden": {"n": 32, "h": 64},
}


@dataclass(frozen=True)
class NcaConfig:
    """Hyperparameters shared by both backbones."""

    n: int = 32
    h: int = 128
    img_channels: int = 1
    fire_rate: float = 0.5
    steps: int = 32

    def __post_init__(self) -> None:
        if self.img_channels < 1:
            raise ConfigError(f"img_channels must be >= 1, got {self.img_channels}")
        if self.n <= self.img_channels + 1:
            raise ConfigError(f"n must exceed img_channels + 1 (image, logit, hidden), got n={self.n}")
        if self.h < 1:
            raise ConfigError(f"h must be >= 1, got {self.h}")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ConfigError(f"fire_rate must be in (0, 1], got {self.fire_rate}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")

    @classmethod
    def preset(cls, name: str, **overrides: float | int) -> "NcaConfig":
        """Published model sizes: standard, small, narrow_hidden."""
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset: {name}. Must be one of {list(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


def param_count(n: int, h: int) -> int:
    """Trainable scalars in one backbone: two 3×3 convs, dense 3n→h, dense h→n (no bias)."""
    if n < 1 or h < 1:
        raise ConfigError(f"n and h must be >= 1, got n={n}, h={h}")
    return 2 * (9 * n * n + n) + (3 * n * h + h) + h * n


@dataclass
class BackboneParams:
    """Weights of one backbone NCA."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    dense1_w: np.ndarray
    dense1_b: np.ndarray
    dense2_w: np.ndarray

    # serialisation order
    FIELDS: ClassVar[tuple[str, ...]] = (
        "conv1_w",
        "conv1_b",
        "conv2_w",
        "conv2_b",
        "dense1_w",
        "dense1_b",
        "dense2_w",
    )

    @staticmethod
    def shapes(n: int, h: int) -> dict[str, tuple[int, ...]]:
        return {
            "conv1_w": (n, n, 3, 3),
            "conv1_b": (n,),
            "conv2_w": (n, n, 3, 3),
            "conv2_b": (n,),
            "dense1_w": (h, 3 * n),
            "dense1_b": (h,),
            "dense2_w": (n, h),
        }

    @property
    def n(self) -> int:
        return int(self.conv1_w.shape[0])

    @property
    def h(self) -> int:
        return int(self.dense1_w.shape[0])

    @property
    def size(self) -> int:
        return sum(int(getattr(self, name).size) for name in self.FIELDS)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def validate(self) -> None:
        expected = self.shapes(self.n, self.h)
        for name in self.FIELDS:
            if getattr(self, name).shape != expected[name]:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {expected[name]}")

    def astype(self, dtype: np.dtype | type) -> "BackboneParams":
        return BackboneParams(**{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})

    def copy(self) -> "BackboneParams":
        return BackboneParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def bind(self, tape: Tape, prefix: str = "") -> dict[str, Var]:
        """Register every array on ``tape`` as a parameter named ``prefix + field``."""
        return {name: tape.parameter(f"{prefix}{name}", getattr(self, name)) for name in self.FIELDS}


def init_params(config: NcaConfig, seed: int, dtype: np.dtype | type = np.float32) -> BackboneParams:
    """Uniform(±sqrt(1/fan_in)) for convs and dense1, zeros for dense2.

    With dense2 at zero every update is zero, so an untrained NCA is the
    identity map.
    """
    n, h = config.n, config.h
    rng = np.random.default_rng(seed)
    shapes = BackboneParams.shapes(n, h)

    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return BackboneParams(
        conv1_w=uniform(shapes["conv1_w"], 9 * n),
        conv1_b=uniform(shapes["conv1_b"], 9 * n),
        conv2_w=uniform(shapes["conv2_w"], 9 * n),
        conv2_b=uniform(shapes["conv2_b"], 9 * n),
        dense1_w=uniform(shapes["dense1_w"], 3 * n),
        dense1_b=uniform(shapes["dense1_b"], 3 * n),
        dense2_w=np.zeros(shapes["dense2_w"], dtype=dtype),
    )


# ============================================================================
# FIRE MASK
# ============================================================================

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_COORD_OFFSET = 1 << 31


def _splitmix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def fire_mask(
    seed: int,
    step_index: int,
    height: int,
    width: int,
    fire_rate: float,
    origin: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Per-cell Bernoulli(fire_rate) mask, a pure function of (seed, step, y, x).

    ``origin`` shifts the cell coordinates, so a crop of a larger grid draws the
    same mask values the full grid would at those cells.
    """
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    key = _splitmix64(key ^ np.uint64(step_index & 0xFFFFFFFFFFFFFFFF))
    ys = (np.arange(height, dtype=np.int64) + origin[0] + _COORD_OFFSET).astype(np.uint64)
    xs = (np.arange(width, dtype=np.int64) + origin[1] + _COORD_OFFSET).astype(np.uint64)
    cells = (ys[:, None] << np.uint64(32)) | xs[None, :]
    bits = _splitmix64(cells ^ key[0])
    uniform = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return uniform < fire_rate


# ============================================================================
# UPDATE RULE
# ============================================================================


def nca_step(
    state: Var,
    params: dict[str, Var],
    fire_rate: float,
    rng_seed: int,
    step_index: int,
    origin: tuple[int, int] = (0, 0),
) -> Var:
    """One asynchronous update: perceive, compute a residual, apply it to firing cells."""
    n = params["conv1_w"].shape[0]
    if state.value.ndim != 3 or state.shape[0] != n:
        raise ShapeError(f"nca_step: state has shape {state.shape}, expected {n} channels")
    tape = state.tape
    _, height, width = state.shape

    p1 = ops.conv3x3_reflect(state, params["conv1_w"], params["conv1_b"])
    p2 = ops.conv3x3_reflect(state, params["conv2_w"], params["conv2_b"])
    z = ops.concat_channels(state, p1, p2)
    pre = ops.dense_per_cell(z, params["dense1_w"], params["dense1_b"])
    hidden = ops.relu(pre)
    delta = ops.dense_per_cell(hidden, params["dense2_w"])
    mask = fire_mask(rng_seed, step_index, height, width, fire_rate, origin)
    update = ops.mul_mask(delta, mask)
    out = ops.add(state, update)
    tape.free(p1, p2, z, pre, hidden, delta, update, state)
    return out


def rollout(
    state: Var,
    params: dict[str, Var],
    steps: int,
    fire_rate: float,
    rng_seed: int,
    origin: tuple[int, int] = (0, 0),
    start_step: int = 0,
) -> Var:
    """Apply ``steps`` updates with step indices start_step..start_step+steps-1.

    Resuming with ``start_step=a`` after an ``a``-step rollout continues the
    same fire-mask sequence.
    """
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    for step_index in range(start_step, start_step + steps):
        state = nca_step(state, params, fire_rate, rng_seed, step_index, origin)
    return state


def simulate(
    params: BackboneParams,
    state: np.ndarray,
    steps: int,
    fire_rate: float,
    rng_seed: int,
    origin: tuple[int, int] = (0, 0),
    dtype: np.dtype | type | None = None,
    start_step: int = 0,
) -> np.ndarray:
    """Run a rollout on plain arrays without recording gradients."""
    tape = Tape(dtype=dtype or params.conv1_w.dtype, record=False)
    bound = params.bind(tape)
    out = rollout(tape.constant(state), bound, steps, fire_rate, rng_seed, origin, start_step)
    return out.value
