import struct

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from longprompt_tts.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    dumps_checkpoint,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
)


def sample():
    return Checkpoint("plm", {"seed": 3, "nested": {"a": [1, 2]}}, 42,
                      {"w": torch.randn(3, 4, dtype=torch.float64), "b": torch.zeros(4),
                       "count": torch.tensor(7), "ids": torch.arange(5)},
                      {"opt_step": 42})


def test_round_trip_exact(tmp_path):
    ck = sample()
    save_checkpoint(ck, tmp_path / "x.mts2")
    back = load_checkpoint(tmp_path / "x.mts2")
    assert (back.kind, back.config, back.step, back.meta) == (ck.kind, ck.config, ck.step, ck.meta)
    assert set(back.tensors) == set(ck.tensors)
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        assert torch.equal(back.tensors[k], v)


def test_serialisation_ignores_insertion_order():
    ck = sample()
    flipped = Checkpoint(ck.kind, dict(reversed(ck.config.items())), ck.step,
                         dict(reversed(ck.tensors.items())), ck.meta)
    assert dumps_checkpoint(ck) == dumps_checkpoint(flipped)


@given(arrays(st.sampled_from([np.float32, np.float64, np.int64]), array_shapes(min_dims=0, max_dims=3)))
def test_arbitrary_tensor_round_trip(arr):
    ck = Checkpoint("x", {}, 0, {"t": torch.from_numpy(arr.copy())})
    back = loads_checkpoint(dumps_checkpoint(ck)).tensors["t"]
    assert back.shape == tuple(arr.shape)
    assert np.array_equal(back.numpy(), arr, equal_nan=arr.dtype.kind == "f")


def test_header_layout():
    data = dumps_checkpoint(sample())
    assert data[:4] == MAGIC == b"MTS2"
    assert struct.unpack("<I", data[4:8]) == (1,)
    n = struct.unpack("<I", data[8:12])[0]
    assert data[12:12 + n] == b"plm"


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"XXXX" + dumps_checkpoint(sample())[4:])


def test_bad_version():
    data = bytearray(dumps_checkpoint(sample()))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        loads_checkpoint(bytes(data))


@given(cut=st.integers(1, 200))
def test_truncation_detected(cut):
    data = dumps_checkpoint(sample())
    with pytest.raises(CheckpointError):
        loads_checkpoint(data[: max(0, len(data) - cut)])


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError, match="trailing"):
        loads_checkpoint(dumps_checkpoint(sample()) + b"\0")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        dumps_checkpoint(Checkpoint("x", {}, 0, {"t": torch.ones(2, dtype=torch.bool)}))
