import struct

import numpy as np
import pytest

from mdgt import tensorio
from mdgt.tensorio import (
    ArchiveError,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
    tensor_bytes,
)


def test_archive_round_trip(tmp_path):
    rng = np.random.Generator(np.random.Philox(0))
    for shape in [(3,), (2, 4), (1, 3, 5, 5), ()]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.mdgt"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


def test_archive_header_layout():
    arr = np.arange(6.0).reshape(2, 3)
    raw = tensor_bytes(arr)
    magic, version, ndim = struct.unpack_from("<4sHH", raw)
    assert magic == b"MDGT" and version == 1 and ndim == 2
    dims = struct.unpack_from("<2Q", raw, 8)
    assert dims == (2, 3)
    payload = np.frombuffer(raw[8 + 16:], dtype="<f8")
    np.testing.assert_array_equal(payload, arr.reshape(-1))


def test_archive_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.mdgt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ArchiveError):
        load_tensor(path)


def test_archive_rejects_truncated_payload(tmp_path):
    arr = np.ones((4, 4))
    path = tmp_path / "t.mdgt"
    save_tensor(path, arr)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ArchiveError):
        load_tensor(path)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.Generator(np.random.Philox(1))
    params = {"enc.w": rng.normal(size=(3, 2)), "enc.b": rng.normal(size=3)}
    meta = {"arch": "demo", "width": 16}
    ckpt_id = save_checkpoint(tmp_path / "ckpt", meta, params)
    meta2, params2, ckpt_id2 = load_checkpoint(tmp_path / "ckpt")
    assert meta2 == meta and ckpt_id2 == ckpt_id
    assert set(params2) == set(params)
    for k in params:
        np.testing.assert_array_equal(params2[k], params[k])


def test_checkpoint_id_stable_across_saves(tmp_path):
    params = {"w": np.arange(4.0)}
    id1 = save_checkpoint(tmp_path / "a", {"k": 1}, params)
    id2 = save_checkpoint(tmp_path / "b", {"k": 1}, params)
    assert id1 == id2
    assert (tmp_path / "a" / "w.mdgt").read_bytes() == (tmp_path / "b" / "w.mdgt").read_bytes()


def test_checkpoint_detects_corruption(tmp_path):
    save_checkpoint(tmp_path / "c", {}, {"w": np.ones(3)})
    f = tmp_path / "c" / "w.mdgt"
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(ArchiveError):
        load_checkpoint(tmp_path / "c")


def test_canonical_json_is_sorted_and_compact():
    blob = tensorio.canonical_json({"b": 1, "a": [1.5, 2]})
    assert blob == b'{"a":[1.5,2],"b":1}'
