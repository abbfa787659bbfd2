"""Tests for geometric perturbations and acquisition artefacts."""

import numpy as np
import pytest

from med_nca.errors import ConfigError, ShapeError
from med_nca.perturb import (
    PerturbSpec,
    apply_anisotropy,
    apply_bias_field,
    apply_ghosting,
    apply_perturbation,
    apply_scale,
    apply_shape,
    apply_translate,
    bias_field,
)
from med_nca.pipeline import TrainSample


def _disk_sample(side: int = 256, radius: float = 50.0, border: int = 0) -> TrainSample:
    yy, xx = np.mgrid[:side, :side]
    mask = (np.hypot(yy - side / 2, xx - side / 2) <= radius).astype(np.float32)
    image = np.where(mask > 0, 0.3, 0.7).astype(np.float32)
    if border:
        image[:, :border] = 0.0
        image[:, -border:] = 0.0
        image[:border, :] = 0.0
        image[-border:, :] = 0.0
    return TrainSample(image=image[None], mask=mask[None], name="disk")


def _centroid(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask[0] > 0.5).mean(axis=0)


class TestPerturbSpec:
    """Tests for PerturbSpec validation."""

    @pytest.mark.parametrize(
        ("kind", "severity"),
        [("scale", 3.0), ("translate", 0.6), ("ghosting", 1.5), ("anisotropy", 2.5), ("anisotropy", 9), ("blur", 1.0)],
    )
    def test_invalid(self, kind: str, severity: float) -> None:
        with pytest.raises(ConfigError):
            PerturbSpec(kind, severity)

    def test_unknown_axis(self) -> None:
        with pytest.raises(ConfigError, match="axis"):
            PerturbSpec("shape", 1.5, axis="diagonal")

    def test_identity(self) -> None:
        assert PerturbSpec("translate", 0.0).is_identity
        assert not PerturbSpec("scale", 0.5).is_identity


class TestGeometric:
    """Tests for scale, shape and translate."""

    def test_scale_down_and_up(self) -> None:
        sample = _disk_sample()
        assert apply_scale(sample, 0.5).image.shape == (1, 128, 128)
        assert apply_scale(sample, 1.5).mask.shape == (1, 384, 384)

    def test_scale_keeps_binary_mask(self) -> None:
        out = apply_scale(_disk_sample(), 0.75)
        assert set(np.unique(out.mask)) <= {0.0, 1.0}

    def test_shape_vertical(self) -> None:
        sample = _disk_sample()
        out = apply_shape(sample, 0.5, "vertical")
        assert out.image.shape == (1, 128, 256)
        assert out.mask.sum() == pytest.approx(0.5 * sample.mask.sum(), rel=0.05)

    def test_shape_horizontal(self) -> None:
        assert apply_shape(_disk_sample(), 2.0, "horizontal").image.shape == (1, 256, 512)

    def test_too_small(self) -> None:
        # 16 · 0.2 rounds to 4
        with pytest.raises(ShapeError, match="smaller than"):
            apply_scale(_disk_sample(side=16, radius=4), 0.2)

    def test_rounds_up_to_minimum(self) -> None:
        # 16 · 0.4 = 6.4 rounds to 8, which is still allowed
        assert apply_scale(_disk_sample(side=16, radius=4), 0.4).image.shape == (1, 8, 8)

    def test_translate_moves_centroid(self) -> None:
        sample = _disk_sample()
        out = apply_translate(sample, 20, "vertical")
        np.testing.assert_allclose(_centroid(out.mask) - _centroid(sample.mask), [20.0, 0.0])
        out = apply_translate(sample, -12, "horizontal")
        np.testing.assert_allclose(_centroid(out.mask) - _centroid(sample.mask), [0.0, -12.0])

    def test_translate_back_restores(self) -> None:
        sample = _disk_sample(border=30)
        there = apply_translate(sample, 25, "vertical")
        back = apply_translate(there, -25, "vertical")
        np.testing.assert_array_equal(back.image, sample.image)
        np.testing.assert_array_equal(back.mask, sample.mask)

    def test_translate_zero_fill(self) -> None:
        out = apply_translate(_disk_sample(), 10, "vertical")
        assert not out.image[:, :10].any()

    def test_translate_too_far(self) -> None:
        with pytest.raises(ShapeError):
            apply_translate(_disk_sample(side=32, radius=8), 32)

    def test_translate_via_spec(self) -> None:
        sample = _disk_sample()
        out = apply_perturbation(sample, PerturbSpec("translate", 0.25, "horizontal"))
        np.testing.assert_allclose(_centroid(out.mask) - _centroid(sample.mask), [0.0, 64.0])


class TestGhosting:
    """Tests for apply_ghosting."""

    def test_zero_intensity(self) -> None:
        image = np.random.default_rng(0).uniform(size=(1, 64, 64)).astype(np.float32)
        np.testing.assert_allclose(apply_ghosting(image, 4, 0.0), image, atol=1e-6)

    def test_constant_image_unchanged(self) -> None:
        image = np.full((1, 32, 32), 0.4, dtype=np.float32)
        np.testing.assert_allclose(apply_ghosting(image, 4, 1.0), image, atol=1e-6)

    def test_mean_preserved(self) -> None:
        image = np.random.default_rng(1).uniform(0.3, 0.7, size=(1, 64, 64))
        out = apply_ghosting(image, 4, 0.8, "horizontal")
        assert abs(out.mean() - image.mean()) < 0.01 * image.mean()
        assert not np.allclose(out, image)

    def test_invalid(self) -> None:
        with pytest.raises(ConfigError):
            apply_ghosting(np.zeros((8, 8)), 1, 0.5)


class TestAnisotropy:
    """Tests for apply_anisotropy."""

    def test_factor_one_is_identity(self) -> None:
        image = np.random.default_rng(2).uniform(size=(1, 16, 16))
        np.testing.assert_array_equal(apply_anisotropy(image, 1), image)

    def test_full_length_block_is_constant_along_axis(self) -> None:
        image = np.random.default_rng(3).uniform(size=(1, 16, 12))
        out = apply_anisotropy(image, 16, "vertical")
        np.testing.assert_allclose(out, np.broadcast_to(image.mean(axis=1, keepdims=True), out.shape), atol=1e-12)

    def test_stripes_average_out(self) -> None:
        image = np.zeros((1, 16, 16))
        image[:, ::2, :] = 1.0
        np.testing.assert_allclose(apply_anisotropy(image, 2, "vertical"), 0.5, atol=1e-12)

    def test_partial_block(self) -> None:
        image = np.random.default_rng(4).uniform(size=(10, 10))
        assert apply_anisotropy(image, 3, "horizontal").shape == (10, 10)


class TestBiasField:
    """Tests for bias_field and apply_bias_field."""

    def test_zero_magnitude(self) -> None:
        image = np.random.default_rng(5).uniform(size=(1, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(apply_bias_field(image, 0.0), image)

    def test_positive_and_smooth(self) -> None:
        height, width = 24, 32
        field = bias_field(height, width, 0.5, seed=3)
        assert (field > 0).all()
        u, v = np.meshgrid(np.linspace(-1, 1, width), np.linspace(-1, 1, height))
        design = np.stack([(u**i * v**j).ravel() for i in range(4) for j in range(4 - i)], axis=1)
        coeffs, *_ = np.linalg.lstsq(design, np.log(field).ravel(), rcond=None)
        residual = np.abs(design @ coeffs - np.log(field).ravel()).max()
        assert residual < 1e-10

    def test_seeded(self) -> None:
        np.testing.assert_array_equal(bias_field(8, 8, 0.3, 1), bias_field(8, 8, 0.3, 1))
        assert not np.array_equal(bias_field(8, 8, 0.3, 1), bias_field(8, 8, 0.3, 2))


class TestApplyPerturbation:
    """Tests for the dispatcher."""

    @pytest.mark.parametrize(("kind", "severity"), [("ghosting", 0.7), ("anisotropy", 4), ("bias_field", 0.5)])
    def test_artefacts_leave_mask(self, kind: str, severity: float) -> None:
        sample = _disk_sample(side=64, radius=16)
        out = apply_perturbation(sample, PerturbSpec(kind, severity, seed=1))
        np.testing.assert_array_equal(out.mask, sample.mask)
        assert out.image.shape == sample.image.shape
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0

    @pytest.mark.parametrize("kind", ["scale", "shape", "translate", "ghosting", "anisotropy", "bias_field"])
    def test_identity_is_a_copy(self, kind: str) -> None:
        sample = _disk_sample(side=32, radius=8)
        identity = {"scale": 1.0, "shape": 1.0, "translate": 0.0, "ghosting": 0.0, "anisotropy": 1, "bias_field": 0.0}
        out = apply_perturbation(sample, PerturbSpec(kind, identity[kind]))
        np.testing.assert_array_equal(out.image, sample.image)
        assert out.image is not sample.image
