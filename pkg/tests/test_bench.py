"""Tests for activation accounting and the size benchmark."""

import csv

import numpy as np
import pytest

from med_nca.backbone import NcaConfig
from med_nca.bench import (
    BenchRow,
    inference_peak,
    loss_cost_per_cell,
    memory_claim,
    run_bench,
    step_cost_per_cell,
    write_bench_csv,
)
from med_nca.pipeline import MedNcaModel


class TestCosts:
    """Tests for the per-cell activation costs."""

    def test_step_cost(self) -> None:
        # 4n + 2h + 1
        assert step_cost_per_cell(NcaConfig(n=4, h=8)) == 33
        assert step_cost_per_cell(NcaConfig()) == 385

    def test_loss_cost(self) -> None:
        assert loss_cost_per_cell(NcaConfig(n=4, h=8)) == 1


class TestMemoryClaim:
    """Tests for the training-memory comparison."""

    def test_exact_ratio_for_tiny_model(self) -> None:
        model = MedNcaModel.create(NcaConfig(n=4, h=8, steps=3), seed=0)
        claim = memory_claim(model, 16, 16)
        assert claim["ratio"] == pytest.approx(16.0)

    def test_default_model(self) -> None:
        model = MedNcaModel.create(NcaConfig(steps=2), seed=0)
        assert memory_claim(model, 32, 32)["ratio"] >= 16.0

    def test_default_model_at_full_size(self) -> None:
        """Test that the default configuration keeps the 16x saving on a 128x128 image."""
        claim = memory_claim(MedNcaModel.create(NcaConfig(), seed=0), 128, 128)
        assert claim["training_stored"] == 25_232_384
        assert claim["naive_training_stored"] == 403_718_144
        assert claim["ratio"] == pytest.approx(16.0)


class TestInferencePeak:
    """Tests for inference memory."""

    def test_independent_of_steps(self) -> None:
        short = MedNcaModel.create(NcaConfig(n=4, h=8, steps=4), seed=0)
        long = MedNcaModel.create(NcaConfig(n=4, h=8, steps=40), seed=0)
        assert inference_peak(short, 32, 32) == inference_peak(long, 32, 32)

    def test_grows_with_size(self) -> None:
        model = MedNcaModel.create(NcaConfig(n=4, h=8, steps=2), seed=0)
        assert inference_peak(model, 64, 64) > inference_peak(model, 32, 32)


class TestRunBench:
    """Tests for run_bench and its CSV."""

    def test_rows_and_csv(self, tmp_path) -> None:
        model = MedNcaModel.create(NcaConfig(n=4, h=8, steps=2), seed=0)
        rows = run_bench(model, [16, 32])
        assert [row.size for row in rows] == [16, 32]
        assert all(row.param_count == 864 for row in rows)
        assert all(row.training_ratio == pytest.approx(16.0) for row in rows)

        path = write_bench_csv(rows, tmp_path / "bench.csv")
        with path.open() as handle:
            loaded = list(csv.DictReader(handle))
        assert list(loaded[0]) == list(BenchRow.__dataclass_fields__)
        assert int(loaded[1]["training_stored"]) == rows[1].training_stored
        assert np.isclose(float(loaded[0]["training_ratio"]), 16.0)
