"""Binary PGM (P5) reading and writing.

Images are stored at 16 bits (maxval 65535, big-endian samples), masks at
8 bits with values 0 and 255.
"""

from pathlib import Path

import numpy as np

from med_nca.errors import PgmFormatError

IMAGE_MAXVAL = 65535
MASK_MAXVAL = 255


def encode_pgm(array: np.ndarray, kind: str = "image") -> bytes:
    """Encode a 2D array (or 1×H×W) as P5 bytes."""
    data = np.asarray(array)
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    if data.ndim != 2:
        raise PgmFormatError(f"PGM needs a 2D array, got shape {np.asarray(array).shape}")
    height, width = data.shape
    if kind == "image":
        if data.size and (data.min() < 0 or data.max() > 1):
            raise PgmFormatError("image values must lie in [0, 1]")
        payload = np.round(data.astype(np.float64) * IMAGE_MAXVAL).astype(">u2").tobytes()
        maxval = IMAGE_MAXVAL
    elif kind == "mask":
        if not np.isin(data, (0, 1)).all():
            raise PgmFormatError("mask values must be 0 or 1")
        payload = (data.astype(np.uint8) * MASK_MAXVAL).tobytes()
        maxval = MASK_MAXVAL
    else:
        raise PgmFormatError(f"Unknown PGM kind: {kind}. Must be 'image' or 'mask'")
    return f"P5\n{width} {height}\n{maxval}\n".encode("ascii") + payload


def _header_tokens(data: bytes) -> tuple[list[bytes], int]:
    """Return the first four header tokens and the payload offset."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise PgmFormatError("malformed PGM header: unexpected end of file")
        ch = data[pos : pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PgmFormatError("malformed PGM header: unterminated comment")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PgmFormatError("malformed PGM header: missing separator before payload")
    return tokens, pos + 1


def decode_pgm(data: bytes) -> tuple[np.ndarray, int]:
    """Decode P5 bytes to (float32 H×W array scaled to [0, 1], maxval)."""
    tokens, offset = _header_tokens(data)
    if tokens[0] != b"P5":
        raise PgmFormatError(f"malformed PGM header: magic {tokens[0]!r}, expected b'P5'")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise PgmFormatError(f"malformed PGM header: {e}") from e
    if width < 1 or height < 1:
        raise PgmFormatError(f"malformed PGM header: size {width}×{height}")
    if maxval not in (IMAGE_MAXVAL, MASK_MAXVAL):
        raise PgmFormatError(f"unexpected maxval {maxval}; expected {IMAGE_MAXVAL} or {MASK_MAXVAL}")

    sample_type = ">u2" if maxval > 255 else "u1"
    expected = width * height * np.dtype(sample_type).itemsize
    payload = data[offset:]
    if len(payload) < expected:
        raise PgmFormatError(f"truncated PGM payload: expected {expected} bytes, got {len(payload)}")
    raw = np.frombuffer(payload[:expected], dtype=sample_type).reshape(height, width)
    return (raw.astype(np.float64) / maxval).astype(np.float32), maxval


def write_pgm(path: str | Path, array: np.ndarray, kind: str = "image") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pgm(array, kind))
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a PGM file as a float32 H×W array in [0, 1] (0/255 masks come back as 0/1)."""
    return decode_pgm(Path(path).read_bytes())[0]
