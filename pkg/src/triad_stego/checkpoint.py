"""Versioned binary container for agent parameters and training state.

Layout (all integers little-endian)::

    b"TSTG"  u16 format_version  u8 architecture (0 = steganalyzer only)
    u32 meta_len  meta_len bytes of UTF-8 JSON (sorted keys)
    u32 n_blobs
    per blob: u16 name_len, name (UTF-8), u8 dtype code, u8 ndim,
              ndim * u32 dims, raw little-endian element bytes

Blobs are written in sorted name order, so saving the same state twice
gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"TSTG"
FORMAT_VERSION = 1

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8, 4: np.int32}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in _CODES:
        raise CheckpointError(f"cannot store dtype {arr.dtype}")
    return arr


def dumps(arch: int, meta: dict, blobs: dict) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HB", FORMAT_VERSION, arch), struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(blobs))]
    for name in sorted(blobs):
        arr = _to_numpy(blobs[name])
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic header {raw[:4]!r}")
    try:
        version, arch = struct.unpack_from("<HB", raw, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
        pos = 7
        (meta_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos:pos + meta_len].decode())
        pos += meta_len
        (n_blobs,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blobs = {}
        for _ in range(n_blobs):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(raw):
                raise CheckpointError(f"blob {name!r} is truncated")
            blobs[name] = np.frombuffer(raw[pos:pos + size], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return arch, meta, blobs


def save(path, arch: int, meta: dict, blobs: dict) -> None:
    Path(path).write_bytes(dumps(arch, meta, blobs))


def load(path) -> tuple[int, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def module_blobs(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, blobs: dict) -> None:
    state = {}
    for key, ref in module.state_dict().items():
        name = f"{prefix}.{key}"
        if name not in blobs:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        state[key] = torch.from_numpy(blobs[name].copy()).to(ref.dtype)
    module.load_state_dict(state)


def optimizer_blobs(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    blobs = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            blobs[f"{prefix}.{idx}.{key}"] = val if isinstance(val, torch.Tensor) else torch.tensor(val)
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    for g in groups:
        g["betas"] = list(g["betas"])
    return blobs, {"param_groups": groups}


def load_optimizer(prefix: str, opt: torch.optim.Optimizer, meta: dict, blobs: dict) -> None:
    state: dict = {}
    for name, arr in blobs.items():
        if not name.startswith(prefix + "."):
            continue
        idx, key = name[len(prefix) + 1:].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    groups = meta["param_groups"]
    for g in groups:
        g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})
