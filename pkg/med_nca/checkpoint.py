"""Binary checkpoint format.

Layout (little-endian): magic ``MEDNCA01``, u32 version, u32 n, h, img_channels,
steps, scale_factor, f32 fire_rate, then for b1 and b2 the BackboneParams
arrays as f32 in field order.
"""

import logging
import struct
from pathlib import Path

import numpy as np

from med_nca.backbone import BackboneParams, NcaConfig, param_count
from med_nca.errors import CheckpointError, MedNcaError
from med_nca.pipeline import MedNcaModel

logger = logging.getLogger(__name__)

MAGIC = b"MEDNCA01"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIf")
HEADER_SIZE = _HEADER.size


def checkpoint_size(n: int, h: int) -> int:
    """Exact byte length of a checkpoint for backbones of size (n, h)."""
    return HEADER_SIZE + 2 * param_count(n, h) * 4


def encode_checkpoint(model: MedNcaModel) -> bytes:
    c = model.config
    header = _HEADER.pack(MAGIC, VERSION, c.n, c.h, c.img_channels, c.steps, model.scale_factor, c.fire_rate)
    payload = b"".join(
        np.ascontiguousarray(array, dtype="<f4").tobytes()
        for params in (model.b1, model.b2)
        for array in params.arrays().values()
    )
    return header + payload


def decode_checkpoint(data: bytes) -> MedNcaModel:
    if len(data) < HEADER_SIZE:
        raise CheckpointError(f"bad checkpoint length: expected at least {HEADER_SIZE}, got {len(data)}")
    magic, version, n, h, img_channels, steps, scale_factor, fire_rate = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        expected = checkpoint_size(n, h)
    except MedNcaError as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from e
    if len(data) != expected:
        raise CheckpointError(f"bad checkpoint length: expected {expected}, got {len(data)}")

    try:
        config = NcaConfig(n=n, h=h, img_channels=img_channels, fire_rate=float(fire_rate), steps=steps)
    except MedNcaError as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from e

    offset = HEADER_SIZE
    backbones = []
    for _ in range(2):
        arrays = {}
        for name, shape in BackboneParams.shapes(n, h).items():
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset += count * 4
        backbones.append(BackboneParams(**arrays))
    try:
        return MedNcaModel(b1=backbones[0], b2=backbones[1], config=config, scale_factor=scale_factor)
    except MedNcaError as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from e


def save_checkpoint(model: MedNcaModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.info(f"Saved checkpoint ({model.param_count} parameters) to {path}")
    return path


def load_checkpoint(path: str | Path) -> MedNcaModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
