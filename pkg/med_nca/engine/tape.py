"""Reverse-mode tape for the fixed Med-NCA op set.

Every op in ``med_nca.engine.ops`` computes its output eagerly with numpy and,
when the tape is recording, appends a node holding a backward closure. Running
``Tape.backward`` replays those nodes in reverse execution order and sums the
contributions that reach each registered parameter.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from med_nca.errors import NonFiniteError, TapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Accountant:
    """Counts activation scalars held by a tape.

    ``stored`` is the number of unique scalars saved for the backward pass.
    ``live``/``peak_live`` track op outputs currently allocated; non-recording
    rollouts release intermediate outputs as soon as a step finishes.
    """

    def __init__(self) -> None:
        self.stored = 0
        self.live = 0
        self.peak_live = 0
        self._saved: dict[int, np.ndarray] = {}

    def allocate(self, count: int) -> None:
        self.live += count
        if self.live > self.peak_live:
            self.peak_live = self.live

    def release(self, count: int) -> None:
        self.live -= count

    def save(self, arrays: Sequence[np.ndarray]) -> None:
        for array in arrays:
            key = id(array)
            if key not in self._saved:
                # keep a reference so the id cannot be recycled while recording
                self._saved[key] = array
                self.stored += int(array.size)

    def summary(self) -> dict[str, int]:
        return {"stored": self.stored, "live": self.live, "peak_live": self.peak_live}


class Var:
    """A tensor value bound to a tape position."""

    __slots__ = ("value", "tape", "index", "requires_grad", "released")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, requires_grad: bool) -> None:
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def item(self) -> float:
        if self.value.size != 1:
            raise TapeError(f"item() needs a single-element tensor, got shape {self.value.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, index={self.index}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Var | None, ...]
    backward: BackwardFn | None
    name: str | None = None


class Tape:
    """Records executed ops so gradients can flow back to parameters.

    A tape belongs to one thread of execution. With ``record=False`` it only
    evaluates values and tracks live allocations, which is what inference uses.
    """

    def __init__(self, dtype: np.dtype | type = np.float32, record: bool = True, check_finite: bool = True) -> None:
        self.dtype = np.dtype(dtype)
        self.record = record
        self.check_finite = check_finite
        self.nodes: list[_Node] = []
        self.parameters: dict[str, Var] = {}
        self.accountant = Accountant()
        self.last_backward_order: list[int] = []

    # ------------------------------------------------------------------
    # leaves
    # ------------------------------------------------------------------

    def parameter(self, name: str, value: np.ndarray) -> Var:
        """Register a leaf tensor that receives a gradient."""
        if name in self.parameters:
            raise TapeError(f"parameter {name!r} registered twice")
        array = np.asarray(value, dtype=self.dtype)
        if not self.record:
            var = Var(array, self, -1, False)
        else:
            var = Var(array, self, len(self.nodes), True)
            self.nodes.append(_Node("parameter", (), None, name))
        self.parameters[name] = var
        return var

    def constant(self, value: np.ndarray) -> Var:
        """Wrap data that is never differentiated (images, seed states)."""
        array = np.asarray(value, dtype=self.dtype)
        self._check(array, "constant")
        self.accountant.allocate(int(array.size))
        return Var(array, self, -1, False)

    # ------------------------------------------------------------------
    # op plumbing
    # ------------------------------------------------------------------

    def emit(
        self,
        op: str,
        value: np.ndarray,
        inputs: Sequence[Var | None],
        backward: BackwardFn,
        saved: Sequence[np.ndarray] = (),
    ) -> Var:
        """Create the output Var of an op and record it when needed."""
        self._check(value, op)
        self.accountant.allocate(int(value.size))
        needs_grad = self.record and any(v is not None and v.requires_grad for v in inputs)
        if not needs_grad:
            return Var(value, self, -1, False)
        self.accountant.save(saved)
        var = Var(value, self, len(self.nodes), True)
        self.nodes.append(_Node(op, tuple(inputs), backward))
        return var

    def free(self, *variables: Var) -> None:
        """Drop finished intermediates from the live count (non-recording only)."""
        if self.record:
            return
        for var in variables:
            if var is not None and not var.released:
                var.released = True
                self.accountant.release(var.size)

    def _check(self, value: np.ndarray, op: str) -> None:
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite values produced by {op}")

    # ------------------------------------------------------------------
    # reverse pass
    # ------------------------------------------------------------------

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Return d(loss)/d(p) for every registered parameter ``p``."""
        if not self.record:
            raise TapeError("tape was not recording; nothing to differentiate")
        if loss.tape is not self or loss.index < 0 or loss.index >= len(self.nodes):
            raise TapeError("loss is not on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")

        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        order: list[int] = []
        for index in range(loss.index, -1, -1):
            node = self.nodes[index]
            grad = grads.get(index)
            if grad is None or node.backward is None:
                continue
            order.append(index)
            input_grads = node.backward(grad)
            for var, g in zip(node.inputs, input_grads):
                if var is None or g is None or not var.requires_grad:
                    continue
                if var.index in grads:
                    grads[var.index] = grads[var.index] + g
                else:
                    grads[var.index] = np.asarray(g, dtype=var.value.dtype)
            # activations of this node are no longer needed
            del grads[index]
        self.last_backward_order = order

        result: dict[str, np.ndarray] = {}
        for name, var in self.parameters.items():
            g = grads.get(var.index)
            result[name] = g.astype(var.value.dtype) if g is not None else np.zeros_like(var.value)
        logger.debug(f"backward visited {len(order)} nodes for {len(result)} parameters")
        return result
