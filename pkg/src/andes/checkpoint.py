"""Versioned binary container for named float32 tensors plus a JSON config.

Layout: magic "CKP1", LE u32 version, u32 config length, UTF-8 JSON config,
u32 tensor count, then per tensor: u16 name length, name, u8 rank,
u32 dims[rank], little-endian f32 payload. Student, teacher, heads, centers,
and optimizer moments all ride in one file under namespaced tensor names.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"CKP1"
VERSION = 1


def save_checkpoint(path: Path | str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += np.asarray([VERSION], dtype="<u4").tobytes()
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += np.asarray([len(cfg_bytes)], dtype="<u4").tobytes()
    blob += cfg_bytes
    names = sorted(tensors)
    blob += np.asarray([len(names)], dtype="<u4").tobytes()
    for name in names:
        # np.ascontiguousarray would promote 0-d scalars to rank 1
        arr = np.asarray(tensors[name], dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        name_b = name.encode("utf-8")
        blob += np.asarray([len(name_b)], dtype="<u2").tobytes()
        blob += name_b
        blob += bytes([arr.ndim])
        blob += np.asarray(arr.shape, dtype="<u4").tobytes()
        blob += arr.astype("<f4", copy=False).tobytes()
    path.write_bytes(bytes(blob))


def load_checkpoint(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataError(f"bad magic in checkpoint {path}")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path}")
    pos = 8
    cfg_len = int(np.frombuffer(blob[pos : pos + 4], dtype="<u4")[0])
    pos += 4
    config = json.loads(blob[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    n = int(np.frombuffer(blob[pos : pos + 4], dtype="<u4")[0])
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        name_len = int(np.frombuffer(blob[pos : pos + 2], dtype="<u2")[0])
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = blob[pos]
        pos += 1
        dims = tuple(int(d) for d in np.frombuffer(blob[pos : pos + 4 * rank], dtype="<u4"))
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(blob[pos : pos + 4 * count], dtype="<f4")
        if payload.size != count:
            raise DataError(f"truncated tensor {name!r} in checkpoint {path}")
        pos += 4 * count
        tensors[name] = payload.reshape(dims).copy()
    return config, tensors


def tensor_digest(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over sorted (name, payload) pairs; the identity of a parameter set."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()
