"""Med-NCA: two-stage Neural Cellular Automata segmentation on a numpy tape engine.

Top-level names are resolved lazily so importing the package stays cheap.
Import specific pieces directly: `from med_nca.pipeline import infer`
"""

__version__ = "0.1.0"

__all__ = [
    "NcaConfig",
    "MedNcaModel",
    "TrainSample",
    "TrainConfig",
    "infer",
    "train_step",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
]


def __getattr__(name: str):
    """Lazy import of the public API."""
    if name == "NcaConfig":
        from .backbone import NcaConfig
        return NcaConfig
    elif name in ("MedNcaModel", "TrainSample", "infer", "train_step"):
        from . import pipeline
        return getattr(pipeline, name)
    elif name in ("TrainConfig", "fit"):
        from . import trainer
        return getattr(trainer, name)
    elif name in ("load_checkpoint", "save_checkpoint"):
        from . import checkpoint
        return getattr(checkpoint, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
