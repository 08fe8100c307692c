"""Named-tensor archive used by every checkpoint (backbone/prompts/policy).

Layout: an 8-byte little-endian header length, a UTF-8 JSON header with
{"tensors": {name: {"shape": [...], "dtype": "f32", "offset": int}},
 "meta": {...}}, then the raw little-endian float32 data. Offsets are relative
to the start of the data section.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch


def _as_f32_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value, dtype=np.float32)
    return np.ascontiguousarray(arr)


def save_archive(path: str | Path, tensors: dict, meta: dict | None = None):
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_f32_array(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype("<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_archive(path: str | Path):
    """Returns (tensors: dict[str, np.ndarray float32], meta: dict)."""
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    data = raw[8 + hlen :]
    tensors = {}
    for name, ent in header["tensors"].items():
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[name] = arr.copy()
    return tensors, header.get("meta", {})


def digest_tensors(tensors: dict) -> str:
    """Byte-level checksum over name-sorted tensors (shape + raw f32 data)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _as_f32_array(tensors[name])
        h.update(name.encode())
        h.update(str(list(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    return digest_tensors({k: v for k, v in module.state_dict().items()})


def save_module(path: str | Path, module: torch.nn.Module, meta: dict | None = None):
    save_archive(path, {k: v for k, v in module.state_dict().items()}, meta)


def load_module(path: str | Path, module: torch.nn.Module) -> dict:
    """Load archive tensors into the module in-place; returns the meta dict."""
    tensors, meta = load_archive(path)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    module.load_state_dict(state)
    return meta
