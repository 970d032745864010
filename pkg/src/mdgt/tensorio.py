"""Binary tensor archives and JSON-manifest checkpoints.

Archive layout (little-endian): magic "MDGT", version u16, ndim u16,
then ndim dimension sizes as u64, then the raw f64 payload in row-major
order. A checkpoint is a directory holding manifest.json (architecture
metadata plus parameter-name -> file mapping) and one archive per
parameter; re-saving identical parameters is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MDGT"
VERSION = 1
_HEADER = struct.Struct("<4sHH")


class ArchiveError(ValueError):
    """Malformed or unreadable tensor archive."""


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    head = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + arr.astype("<f8").tobytes()


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArchiveError(f"{path}: truncated header")
    magic, version, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    dims = struct.unpack_from(f"<{ndim}Q", raw, off) if ndim else ()
    off += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    payload = raw[off:]
    if len(payload) != 8 * count:
        raise ArchiveError(f"{path}: payload is {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def canonical_json(obj) -> bytes:
    """Stable JSON bytes (sorted keys, no whitespace drift) for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(directory: str | Path, meta: dict,
                    params: dict[str, np.ndarray]) -> str:
    """Write a checkpoint directory; returns its content hash id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(params):
        fname = name.replace("/", "_") + ".mdgt"
        data = tensor_bytes(params[name])
        (directory / fname).write_bytes(data)
        entries[name] = {"file": fname, "sha256": sha256_hex(data)}
    manifest = {"format": "mdgt-checkpoint", "version": VERSION,
                "meta": meta, "params": entries}
    blob = canonical_json(manifest)
    ckpt_id = sha256_hex(blob)
    manifest["checkpoint_id"] = ckpt_id
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return ckpt_id


def load_checkpoint(directory: str | Path) -> tuple[dict, dict[str, np.ndarray], str]:
    """Read (meta, params, checkpoint_id) from a checkpoint directory."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "mdgt-checkpoint":
        raise ArchiveError(f"{directory}: not a checkpoint manifest")
    params = {}
    for name, entry in manifest["params"].items():
        data = (directory / entry["file"]).read_bytes()
        if sha256_hex(data) != entry["sha256"]:
            raise ArchiveError(f"{directory}: checksum mismatch for {name}")
        params[name] = load_tensor(directory / entry["file"])
    return manifest["meta"], params, manifest["checkpoint_id"]
