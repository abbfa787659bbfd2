"""
Example site configuration for the Med-NCA harness.

Copy this file to config.py and customize. Every setting is optional; the
harness falls back to its built-in defaults for anything not defined here.
"""

from typing import TypedDict


class SplitRatios(TypedDict):
    """Fractions of generated samples assigned to each split."""

    train: float
    val: float
    test: float


# =============================================================================
# DATASET GENERATION
# =============================================================================
# Samples are assigned in index order: first train, then val, then test.
# 250 samples with these ratios give the 200 / 25 / 25 desk-scale set.

DATASET_SPLITS: SplitRatios = {
    "train": 0.8,
    "val": 0.1,
    "test": 0.1,
}


# =============================================================================
# PERTURBATION SWEEPS
# =============================================================================
# Severity grids per perturbation kind. Identity severities (1.0 for scale and
# shape, 0 for translate/ghosting/bias_field, 1 for anisotropy) should stay in
# each grid so the sweep reproduces the unperturbed evaluation.
#
# translate: fraction of the image side
# anisotropy: integer block factor along one axis
# bias_field: polynomial coefficient magnitude

SWEEP_GRIDS = {
    "scale": [0.5, 0.8, 1.0, 1.2, 1.5, 2.0],
    "shape": [0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
    "translate": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    "ghosting": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "anisotropy": [1, 2, 4, 6, 8],
    "bias_field": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
}

# Every k-th frequency line is attenuated by the ghosting artefact
GHOSTING_NUM_GHOSTS = 4
