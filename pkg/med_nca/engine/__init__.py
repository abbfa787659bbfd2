"""Differentiable grid engine: tape, accountant and the fixed op set.

Ops are imported lazily; import what you need directly:
`from med_nca.engine.ops import conv3x3_reflect`
"""

import importlib

__all__ = [
    "Tape",
    "Var",
    "Accountant",
    "ops",
]


def __getattr__(name: str):
    """Lazy import engine pieces."""
    if name in ("Tape", "Var", "Accountant"):
        return getattr(importlib.import_module(".tape", __name__), name)
    elif name == "ops":
        # import_module does not consult this hook, so it cannot re-enter it
        return importlib.import_module(".ops", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
