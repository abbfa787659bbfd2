"""Differentiable ops used by the backbone NCA and the two-stage pipeline.

All spatial tensors are laid out channel-first (C×H×W). Each op validates its
inputs, computes the forward value with numpy and hands a backward closure to
the tape. Ops never mutate their inputs.
"""

from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from med_nca.errors import ShapeError

from .tape import Tape, Var

ResampleMode = Literal["nearest", "average", "bilinear"]
RESAMPLE_MODES: tuple[str, ...] = ("nearest", "average", "bilinear")


def _tape_of(*variables: Var) -> Tape:
    tape = variables[0].tape
    for var in variables[1:]:
        if var.tape is not tape:
            raise ShapeError("inputs belong to different tapes")
    return tape


def _require_chw(x: Var, op: str) -> tuple[int, int, int]:
    if x.value.ndim != 3:
        raise ShapeError(f"{op}: expected C×H×W input, got shape {x.shape}")
    return x.value.shape  # type: ignore[return-value]


# ============================================================================
# CONVOLUTION AND DENSE LAYERS
# ============================================================================


def reflect_pad(x: np.ndarray) -> np.ndarray:
    """Pad H and W by one cell, mirroring without repeating the edge (-1 -> 1)."""
    return np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")


def _im2col(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    windows = sliding_window_view(reflect_pad(x), (3, 3), axis=(1, 2))  # C, H, W, 3, 3
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)


def _fold_reflect(grad_padded: np.ndarray) -> np.ndarray:
    """Adjoint of ``reflect_pad``: route border gradients to their mirror cells."""
    g = grad_padded.copy()
    h = g.shape[1] - 2
    w = g.shape[2] - 2
    g[:, 2, :] += g[:, 0, :]
    g[:, h - 1, :] += g[:, h + 1, :]
    g = g[:, 1 : h + 1, :]
    g[:, :, 2] += g[:, :, 0]
    g[:, :, w - 1] += g[:, :, w + 1]
    return g[:, :, 1 : w + 1]


def conv3x3_reflect(x: Var, weight: Var, bias: Var) -> Var:
    """3×3 convolution (cross-correlation) with reflect padding, stride 1."""
    tape = _tape_of(x, weight, bias)
    c, h, w = _require_chw(x, "conv3x3_reflect")
    if h < 2 or w < 2:
        raise ShapeError(f"conv3x3_reflect: reflect padding needs H, W >= 2, got {h}×{w}")
    if weight.value.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise ShapeError(f"conv3x3_reflect: weight shape {weight.shape} does not match {c} input channels")
    k = weight.shape[0]
    if bias.shape != (k,):
        raise ShapeError(f"conv3x3_reflect: bias shape {bias.shape}, expected ({k},)")

    x_val = x.value
    w_mat = weight.value.reshape(k, c * 9)
    out = (w_mat @ _im2col(x_val)).reshape(k, h, w) + bias.value[:, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g2 = g.reshape(k, h * w)
        cols = _im2col(x_val)
        grad_w = (g2 @ cols.T).reshape(k, c, 3, 3)
        grad_b = g2.sum(axis=1)
        grad_cols = (w_mat.T @ g2).reshape(c, 3, 3, h, w)
        grad_padded = np.zeros((c, h + 2, w + 2), dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                grad_padded[:, dy : dy + h, dx : dx + w] += grad_cols[:, dy, dx]
        return _fold_reflect(grad_padded), grad_w, grad_b

    return tape.emit("conv3x3_reflect", out, (x, weight, bias), backward, saved=(x_val,))


def dense_per_cell(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """Apply the same dense layer to every cell (a 1×1 convolution)."""
    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape = _tape_of(*inputs)
    c, h, w = _require_chw(x, "dense_per_cell")
    if weight.value.ndim != 2 or weight.shape[1] != c:
        raise ShapeError(f"dense_per_cell: weight shape {weight.shape} does not match {c} input channels")
    m = weight.shape[0]
    if bias is not None and bias.shape != (m,):
        raise ShapeError(f"dense_per_cell: bias shape {bias.shape}, expected ({m},)")

    x2 = x.value.reshape(c, h * w)
    w_val = weight.value
    out = w_val @ x2
    if bias is not None:
        out = out + bias.value[:, None]
    out = out.reshape(m, h, w)

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        g2 = g.reshape(m, h * w)
        grads = ((w_val.T @ g2).reshape(c, h, w), g2 @ x2.T)
        if bias is not None:
            grads = grads + (g2.sum(axis=1),)
        return grads

    return tape.emit("dense_per_cell", out, inputs, backward, saved=(x.value,))


# ============================================================================
# ELEMENTWISE
# ============================================================================


def relu(x: Var) -> Var:
    x_val = x.value
    out = np.maximum(x_val, 0)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (x_val > 0),)

    return x.tape.emit("relu", out, (x,), backward, saved=(x_val,))


def sigmoid(x: Var) -> Var:
    # tanh form stays finite for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return x.tape.emit("sigmoid", out, (x,), backward, saved=(out,))


def add(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g, g

    return tape.emit("add", a.value + b.value, (a, b), backward)


def mul(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    a_val, b_val = a.value, b.value

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * b_val, g * a_val

    return tape.emit("mul", a_val * b_val, (a, b), backward, saved=(a_val, b_val))


def scale(x: Var, factor: float) -> Var:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return x.tape.emit("scale", x.value * factor, (x,), backward)


def sum_all(x: Var) -> Var:
    out = np.asarray(x.value.sum(), dtype=x.value.dtype)
    shape = x.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(shape, g, dtype=g.dtype),)

    return x.tape.emit("sum_all", out, (x,), backward)


def mul_mask(x: Var, mask: np.ndarray) -> Var:
    """Multiply every channel of ``x`` by a constant per-cell H×W mask."""
    _, h, w = _require_chw(x, "mul_mask")
    if mask.shape != (h, w):
        raise ShapeError(f"mul_mask: mask shape {mask.shape} does not match grid {h}×{w}")
    m = mask.astype(x.value.dtype)[None]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * m,)

    return x.tape.emit("mul_mask", x.value * m, (x,), backward, saved=(m,))


# ============================================================================
# CHANNEL AND SPATIAL PLUMBING
# ============================================================================


def concat_channels(*xs: Var) -> Var:
    """Stack inputs along the channel axis in argument order."""
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    tape = _tape_of(*xs)
    spatial = _require_chw(xs[0], "concat_channels")[1:]
    for x in xs[1:]:
        if _require_chw(x, "concat_channels")[1:] != spatial:
            raise ShapeError(f"concat_channels: spatial mismatch {x.shape[1:]} vs {spatial}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    out = np.concatenate([x.value for x in xs], axis=0)

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return tape.emit("concat_channels", out, xs, backward)


def channel(x: Var, index: int, count: int = 1) -> Var:
    """Slice ``count`` channels starting at ``index``."""
    c, h, w = _require_chw(x, "channel")
    if index < 0 or count < 1 or index + count > c:
        raise ShapeError(f"channel: range [{index}, {index + count}) outside {c} channels")
    out = x.value[index : index + count].copy()

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros((c, h, w), dtype=g.dtype)
        full[index : index + count] = g
        return (full,)

    return x.tape.emit("channel", out, (x,), backward)


def crop(x: Var, top: int, left: int, height: int, width: int) -> Var:
    c, h, w = _require_chw(x, "crop")
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(f"crop: window ({top}, {left}, {height}, {width}) outside {h}×{w}")
    out = x.value[:, top : top + height, left : left + width].copy()

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros((c, h, w), dtype=g.dtype)
        full[:, top : top + height, left : left + width] = g
        return (full,)

    return x.tape.emit("crop", out, (x,), backward)


# ============================================================================
# RESAMPLING
# ============================================================================


def resample_matrix(n_in: int, n_out: int, mode: str, dtype: np.dtype | type = np.float64) -> np.ndarray:
    """Return the n_out×n_in linear map that resamples one axis."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"resample: sizes must be >= 1, got {n_in} -> {n_out}")
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    if mode == "nearest":
        # floor((i + 0.5) * n_in / n_out) in exact integer arithmetic
        src = np.minimum(((2 * rows + 1) * n_in) // (2 * n_out), n_in - 1)
        matrix[rows, src] = 1.0
    elif mode == "average":
        if n_in % n_out:
            raise ShapeError(f"average-area resampling needs an integer factor, got {n_in} -> {n_out}")
        factor = n_in // n_out
        for i in rows:
            matrix[i, i * factor : (i + 1) * factor] = 1.0 / factor
    elif mode == "bilinear":
        src = np.maximum((rows + 0.5) * (n_in / n_out) - 0.5, 0.0)
        lo = np.floor(src).astype(np.int64)
        lo = np.minimum(lo, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        np.add.at(matrix, (rows, lo), 1.0 - frac)
        np.add.at(matrix, (rows, hi), frac)
    else:
        raise ShapeError(f"unknown resample mode {mode!r}; expected one of {RESAMPLE_MODES}")
    return matrix.astype(dtype)


def resample_array(x: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    """Resample a C×H×W (or H×W) array without touching any tape."""
    squeeze = x.ndim == 2
    arr = x[None] if squeeze else x
    if arr.ndim != 3:
        raise ShapeError(f"resample: expected C×H×W input, got shape {x.shape}")
    _, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        out = arr.copy()
    else:
        ry = resample_matrix(h, out_h, mode, arr.dtype)
        rx = resample_matrix(w, out_w, mode, arr.dtype)
        out = ry @ arr @ rx.T
    return out[0] if squeeze else out


def resample(x: Var, out_h: int, out_w: int, mode: str = "nearest") -> Var:
    """Resample every channel of ``x`` to out_h×out_w."""
    _, h, w = _require_chw(x, "resample")
    ry = resample_matrix(h, out_h, mode, x.value.dtype)
    rx = resample_matrix(w, out_w, mode, x.value.dtype)
    out = resample_array(x.value, out_h, out_w, mode)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (ry.T @ g @ rx,)

    return x.tape.emit("resample", out, (x,), backward)


def upscale_imprint(
    x: Var,
    image: np.ndarray,
    window: tuple[int, int, int, int] | None = None,
    mode: str = "nearest",
) -> Var:
    """Upscale ``x`` to the size of ``image`` and overwrite its leading channels.

    ``image`` is C_img×H×W. When ``window`` = (top, left, height, width) is
    given only that region of the upscaled grid is materialised, which equals
    upscaling the whole grid and cropping afterwards.
    """
    c, h, w = _require_chw(x, "upscale_imprint")
    if image.ndim != 3 or image.shape[0] >= c:
        raise ShapeError(f"upscale_imprint: image shape {image.shape} incompatible with {c}-channel state")
    img_c, big_h, big_w = image.shape
    top, left, out_h, out_w = window if window is not None else (0, 0, big_h, big_w)
    if top < 0 or left < 0 or top + out_h > big_h or left + out_w > big_w:
        raise ShapeError(f"upscale_imprint: window {window} outside {big_h}×{big_w}")

    ry = resample_matrix(h, big_h, mode, x.value.dtype)[top : top + out_h]
    rx = resample_matrix(w, big_w, mode, x.value.dtype)[left : left + out_w]
    out = ry @ x.value @ rx.T
    out[:img_c] = image[:, top : top + out_h, left : left + out_w]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        g = g.copy()
        g[:img_c] = 0
        return (ry.T @ g @ rx,)

    return x.tape.emit("upscale_imprint", out, (x,), backward)
