"""Parameter checkpoints: ``STG1`` magic, array count, then shape-prefixed float64 arrays.

The first array holds the policy dimensions ``[h, w, K]``; the parameters follow
in :data:`grid_grpo.policy.PARAM_ORDER`. All integers are little-endian uint32,
all values little-endian float64.
"""

import struct
from pathlib import Path

import numpy as np
from loguru import logger

from grid_grpo.constants import CHECKPOINT_MAGIC
from grid_grpo.models.prompts import GridShape
from grid_grpo.numerics import Tensor
from grid_grpo.policy import PARAM_ORDER, PolicyParams


def _pack(array: np.ndarray) -> bytes:
    header = struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f8").tobytes()


def checkpoint_bytes(params: PolicyParams) -> bytes:
    dims = np.array([params.shape.h, params.shape.w, params.num_categories], dtype=np.float64)
    arrays = [dims] + [params.tensors[name].data for name in PARAM_ORDER]
    return CHECKPOINT_MAGIC + struct.pack("<I", len(arrays)) + b"".join(_pack(a) for a in arrays)


def save_checkpoint(params: PolicyParams, path: Path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(params))
    logger.info(f"Saved checkpoint with {params.num_parameters} parameters to {path}")
    return path


def _unpack(blob: bytes, offset: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 8 * count
    if end > len(blob):
        raise ValueError("Checkpoint is truncated")
    array = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
    return array, end


def load_checkpoint(path: Path, trainable: bool = True) -> PolicyParams:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint: magic {blob[:4]!r} != {CHECKPOINT_MAGIC!r}")
    try:
        (count,) = struct.unpack_from("<I", blob, 4)
        offset = 8
        arrays = []
        for _ in range(count):
            array, offset = _unpack(blob, offset)
            arrays.append(array)
    except struct.error as err:
        raise ValueError(f"{path} is truncated: {err}") from err
    if count != len(PARAM_ORDER) + 1:
        raise ValueError(f"{path} holds {count} arrays, expected {len(PARAM_ORDER) + 1}")
    h, w, K = (int(v) for v in arrays[0])
    tensors = {name: Tensor(array, requires_grad=trainable) for name, array in zip(PARAM_ORDER, arrays[1:])}
    logger.debug(f"Loaded checkpoint {path} for a {h}x{w} grid with {K} categories")
    return PolicyParams(GridShape(h=h, w=w), K, tensors)
