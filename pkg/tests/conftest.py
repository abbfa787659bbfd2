"""Pytest fixtures for Med-NCA tests."""

import os
from typing import Callable

import numpy as np
import pytest

from med_nca.backbone import NcaConfig
from med_nca.pipeline import MedNcaModel, TrainSample


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: end-to-end runs, enabled with MEDNCA_RUN_SLOW=1")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if os.getenv("MEDNCA_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set MEDNCA_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config() -> NcaConfig:
    """4 channels, 8 hidden units, 3 steps per stage."""
    return NcaConfig(n=4, h=8, fire_rate=0.5, steps=3)


@pytest.fixture
def random_model() -> Callable[..., MedNcaModel]:
    """Factory for a model whose update weights are non-zero (so updates actually happen)."""

    def make(
        seed: int = 0,
        config: NcaConfig | None = None,
        dtype: np.dtype | type = np.float64,
        scale_factor: int = 4,
    ) -> MedNcaModel:
        config = config or NcaConfig(n=4, h=8, fire_rate=0.5, steps=3)
        model = MedNcaModel.create(config, seed=seed, scale_factor=scale_factor, dtype=dtype)
        rng = np.random.default_rng(seed + 1000)
        for params in (model.b1, model.b2):
            params.dense2_w = rng.uniform(-0.3, 0.3, size=params.dense2_w.shape).astype(dtype)
        return model

    return make


@pytest.fixture
def make_sample() -> Callable[..., TrainSample]:
    """Random image with a centred square mask."""

    def make(height: int = 8, width: int = 8, seed: int = 0, name: str = "sample") -> TrainSample:
        rng = np.random.default_rng(seed)
        image = rng.uniform(0.0, 1.0, size=(1, height, width)).astype(np.float32)
        mask = np.zeros((1, height, width), dtype=np.float32)
        mask[:, height // 4 : 3 * height // 4, width // 4 : 3 * width // 4] = 1.0
        return TrainSample(image=image, mask=mask, name=name)

    return make


@pytest.fixture
def finite_difference() -> Callable[[Callable[[np.ndarray], float], np.ndarray, float], np.ndarray]:
    """Central differences of a scalar function with respect to every entry of ``x``."""

    def grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        out = np.zeros_like(x, dtype=np.float64)
        for idx in np.ndindex(*x.shape):
            original = x[idx]
            x[idx] = original + eps
            plus = fn(x)
            x[idx] = original - eps
            minus = fn(x)
            x[idx] = original
            out[idx] = (plus - minus) / (2 * eps)
        return out

    return grad
