import struct

import numpy as np
import pytest

from grid_grpo.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from grid_grpo.constants import CHECKPOINT_MAGIC
from grid_grpo.models.prompts import GridShape
from grid_grpo.numerics import Rng
from grid_grpo.policy import PARAM_ORDER, init_params


def _make_policy(seed: int = 0):
    return init_params(GridShape(h=3, w=4), 4, 16, 8, Rng(seed))


def test_checkpoint_restores_parameters_exactly(tmp_path):
    theta = _make_policy()
    loaded = load_checkpoint(save_checkpoint(theta, tmp_path / "policy.stg"))
    assert loaded.shape == GridShape(h=3, w=4)
    assert loaded.num_categories == 4
    for name in PARAM_ORDER:
        assert np.array_equal(loaded.tensors[name].data, theta.tensors[name].data)
        assert loaded.tensors[name].requires_grad


def test_checkpoint_bytes_are_deterministic():
    blob = checkpoint_bytes(_make_policy())
    assert blob == checkpoint_bytes(_make_policy())
    assert blob.startswith(CHECKPOINT_MAGIC)
    assert struct.unpack_from("<I", blob, 4)[0] == len(PARAM_ORDER) + 1


def test_frozen_load(tmp_path):
    path = save_checkpoint(_make_policy(), tmp_path / "reference.stg")
    frozen = load_checkpoint(path, trainable=False)
    assert not any(t.requires_grad for t in frozen.tensors.values())


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.stg"
    path.write_bytes(b"ZARR" + checkpoint_bytes(_make_policy())[4:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "short.stg"
    path.write_bytes(checkpoint_bytes(_make_policy())[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_wrong_array_count(tmp_path):
    dims = np.array([3.0, 4.0, 4.0])
    blob = CHECKPOINT_MAGIC + struct.pack("<I", 1) + struct.pack("<II", 1, 3) + dims.astype("<f8").tobytes()
    path = tmp_path / "dims_only.stg"
    path.write_bytes(blob)
    with pytest.raises(ValueError, match="holds 1 arrays"):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.stg")
