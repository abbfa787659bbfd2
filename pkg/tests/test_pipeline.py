"""Tests for the two-stage Med-NCA pipeline."""

import numpy as np
import pytest

from med_nca.backbone import NcaConfig
from med_nca.engine.tape import Tape
from med_nca.errors import ShapeError
from med_nca.losses import bce_loss, dice_loss
from med_nca.pipeline import (
    MedNcaModel,
    TrainSample,
    derive_seeds,
    downsample,
    infer,
    lift_state,
    predict_patch,
    sample_loss,
    seed_state,
    stage1,
    train_step,
)


class TestBuildingBlocks:
    """Tests for seeding, downsampling and the stage hand-off."""

    def test_seed_state(self) -> None:
        image = np.full((1, 4, 4), 0.25)
        state = seed_state(image, 5)
        assert state.shape == (5, 4, 4)
        np.testing.assert_array_equal(state[0], image[0])
        assert not state[1:].any()

    def test_downsample_average(self) -> None:
        np.testing.assert_array_equal(downsample(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2), [[[2.5]]])

    def test_downsample_needs_divisible_size(self) -> None:
        with pytest.raises(ShapeError, match="not divisible"):
            downsample(np.zeros((1, 10, 8)), 4)

    def test_lift_state(self) -> None:
        state_lo = np.arange(3 * 2 * 2, dtype=np.float64).reshape(3, 2, 2)
        image = np.random.default_rng(0).uniform(size=(1, 8, 8))
        lifted = lift_state(state_lo, image)
        np.testing.assert_array_equal(lifted[0], image[0])
        np.testing.assert_array_equal(lifted[2, :4, :4], np.full((4, 4), state_lo[2, 0, 0]))
        np.testing.assert_array_equal(lifted[1, 4:, 4:], np.full((4, 4), state_lo[1, 1, 1]))

    def test_stage1_zero_steps_returns_seed(self) -> None:
        model = MedNcaModel.create(NcaConfig(n=4, h=8, steps=0), seed=0)
        image = np.random.default_rng(1).uniform(size=(1, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(stage1(model, image, 0), seed_state(image, 4))

    def test_derive_seeds_independent_and_stable(self) -> None:
        seeds = derive_seeds(7)
        assert seeds == derive_seeds(7)
        assert len(set(seeds)) == 3
        assert seeds != derive_seeds(8)


class TestMedNcaModel:
    """Tests for the model container."""

    def test_param_count(self) -> None:
        assert MedNcaModel.create(NcaConfig(), seed=0).param_count == 70016

    def test_parameters_round_trip(self, random_model) -> None:
        model = random_model()
        again = model.with_parameters(model.parameters())
        for name, value in model.parameters().items():
            np.testing.assert_array_equal(again.parameters()[name], value)

    def test_backbone_mismatch(self) -> None:
        small = MedNcaModel.create(NcaConfig(n=4, h=8), seed=0)
        with pytest.raises(ShapeError, match="config says"):
            MedNcaModel(small.b1, small.b2, NcaConfig(n=5, h=8))

    @pytest.mark.parametrize("scale_factor", [0, 1])
    def test_scale_factor_at_least_two(self, scale_factor: int) -> None:
        with pytest.raises(ShapeError, match="scale_factor must be >= 2"):
            MedNcaModel.create(NcaConfig(n=4, h=8), seed=0, scale_factor=scale_factor)

    def test_backbones_differ(self) -> None:
        model = MedNcaModel.create(NcaConfig(n=4, h=8), seed=0)
        assert not np.array_equal(model.b1.conv1_w, model.b2.conv1_w)


class TestTraining:
    """Tests for sample_loss and train_step."""

    def test_gradients_match_finite_differences(self, random_model, make_sample) -> None:
        model = random_model(seed=1)
        sample = make_sample(8, 8, seed=2)

        tape = Tape(dtype=np.float64)
        loss = sample_loss(tape, model, sample, rng_seed=5)
        analytic = tape.backward(loss)

        params = {name: value.copy() for name, value in model.parameters().items()}
        eps = 1e-5

        def loss_at(flat: dict[str, np.ndarray]) -> float:
            return sample_loss(Tape(dtype=np.float64, record=False), model.with_parameters(flat), sample, 5).item()

        for name, value in params.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(*value.shape):
                original = value[idx]
                value[idx] = original + eps
                plus = loss_at(params)
                value[idx] = original - eps
                minus = loss_at(params)
                value[idx] = original
                numeric[idx] = (plus - minus) / (2 * eps)
            err = np.linalg.norm(numeric - analytic[name])
            scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic[name]), 1e-8)
            assert err / scale < 1e-4, f"{name}: relative error {err / scale}"

    def test_loss_is_deterministic(self, random_model, make_sample) -> None:
        model = random_model()
        sample = make_sample(16, 16)
        a = sample_loss(Tape(dtype=np.float64, record=False), model, sample, 3).item()
        b = sample_loss(Tape(dtype=np.float64, record=False), model, sample, 3).item()
        assert a == b

    def test_train_step_independent_of_workers(self, random_model, make_sample) -> None:
        model = random_model(dtype=np.float32)
        batch = [make_sample(16, 16, seed=i, name=f"s{i}") for i in range(4)]
        serial = train_step(model, batch, 11, workers=1)
        parallel = train_step(model, batch, 11, workers=3)
        assert serial.loss == parallel.loss
        assert serial.sample_losses == parallel.sample_losses
        for name, g in serial.grads.items():
            np.testing.assert_array_equal(g, parallel.grads[name])

    def test_train_step_averages_batch(self, random_model, make_sample) -> None:
        model = random_model()
        batch = [make_sample(8, 8, seed=i) for i in range(2)]
        result = train_step(model, batch, 4)
        assert result.loss == pytest.approx(np.mean(result.sample_losses))
        assert result.stored_activations > 0

    def test_empty_batch(self, random_model) -> None:
        with pytest.raises(ShapeError, match="non-empty"):
            train_step(random_model(), [], 0)

    def test_size_not_divisible(self, random_model) -> None:
        sample = TrainSample(np.zeros((1, 10, 8)), np.zeros((1, 10, 8)))
        with pytest.raises(ShapeError, match="not divisible"):
            sample_loss(Tape(), random_model(), sample, 0)

    def test_non_binary_mask(self, random_model) -> None:
        sample = TrainSample(np.zeros((1, 8, 8)), np.full((1, 8, 8), 0.5))
        with pytest.raises(ShapeError, match="not binary"):
            sample_loss(Tape(), random_model(), sample, 0)


class TestInfer:
    """Tests for full-image inference."""

    def test_untrained_model_predicts_background(self) -> None:
        # logit channel stays 0, sigmoid is exactly 0.5 and the threshold is strict
        model = MedNcaModel.create(NcaConfig(n=4, h=8, steps=3), seed=0)
        result = infer(model, np.random.default_rng(0).uniform(size=(1, 16, 16)), 0)
        np.testing.assert_array_equal(result.prob, np.full((1, 16, 16), 0.5, dtype=np.float32))
        assert not result.mask.any()

    def test_pad_and_crop(self, random_model) -> None:
        image = np.random.default_rng(1).uniform(size=(1, 18, 23))
        result = infer(random_model(), image, 0)
        assert result.mask.shape == (1, 18, 23)
        assert result.prob.shape == (1, 18, 23)
        np.testing.assert_array_equal(result.mask, result.prob > 0.5)

    def test_accepts_2d_image(self, random_model) -> None:
        result = infer(random_model(), np.zeros((12, 12)), 0)
        assert result.mask.shape == (1, 12, 12)

    def test_deterministic(self, random_model) -> None:
        image = np.random.default_rng(2).uniform(size=(1, 16, 16))
        a = infer(random_model(), image, 9)
        b = infer(random_model(), image, 9)
        np.testing.assert_array_equal(a.prob, b.prob)

    def test_fire_rate_override(self, random_model) -> None:
        image = np.random.default_rng(3).uniform(size=(1, 16, 16))
        model = random_model()
        assert not np.array_equal(infer(model, image, 0).prob, infer(model, image, 0, fire_rate=1.0).prob)

    def test_too_small(self, random_model) -> None:
        with pytest.raises(ShapeError, match="smaller than 8"):
            infer(random_model(), np.zeros((1, 4, 16)), 0)

    def test_peak_live_independent_of_steps(self, random_model) -> None:
        image = np.random.default_rng(4).uniform(size=(1, 16, 16))
        short = random_model(config=NcaConfig(n=4, h=8, steps=8))
        long = random_model(config=NcaConfig(n=4, h=8, steps=64))
        assert infer(short, image, 0).peak_live == infer(long, image, 0).peak_live


class TestUntrainedLoss:
    """Closed-form loss of a model whose logits stay at zero."""

    def test_full_mask_loss(self) -> None:
        model = MedNcaModel.create(NcaConfig(n=4, h=8, steps=2), seed=0)
        sample = TrainSample(
            image=np.random.default_rng(0).uniform(size=(1, 16, 16)).astype(np.float32),
            mask=np.ones((1, 16, 16), dtype=np.float32),
        )
        loss = sample_loss(Tape(record=False), model, sample, 0).item()
        # bce = ln 2 at p = 0.5, dice = 1 - N / 1.5N
        assert loss == pytest.approx(np.log(2.0) + 1.0 / 3.0, abs=1e-5)

    def test_larger_image_needs_no_patching(self, random_model) -> None:
        model = random_model()
        for side in (32, 64):
            assert infer(model, np.zeros((1, side, side)), 0).mask.shape == (1, side, side)


class TestPredictPatch:
    """Tests for predict_patch."""

    def test_patch_is_quarter_side(self, random_model, make_sample) -> None:
        prob, target = predict_patch(random_model(), make_sample(64, 64), 0)
        assert prob.shape == (1, 16, 16)
        assert target.shape == (1, 16, 16)

    def test_matches_training_loss(self, random_model, make_sample) -> None:
        """Test that the patch is the one sample_loss trains on."""
        model = random_model(seed=2)
        sample = make_sample(32, 32, seed=3)
        prob, target = predict_patch(model, sample, 9)
        expected = dice_loss(prob, target).item() + bce_loss(prob, target).item()
        actual = sample_loss(Tape(dtype=np.float64, record=False), model, sample, 9).item()
        assert actual == pytest.approx(expected, abs=1e-12)
