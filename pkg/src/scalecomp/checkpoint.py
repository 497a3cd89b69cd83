"""Single-file checkpoint container: a JSON index plus raw little-endian arrays.

Layout:
    bytes 0..8    magic b"SCNARR01"
    bytes 8..16   uint64 little-endian header length L
    bytes 16..16+L  UTF-8 JSON header
    remainder     array payload, C-contiguous little-endian bytes

Header schema:
    {"version": 1,
     "meta": {...},                         # free-form JSON (model hyperparams)
     "arrays": [{"name": str, "dtype": tag, "shape": [int, ...],
                 "offset": int, "nbytes": int}, ...]}

dtype tags: f16 f32 f64 i8 i16 i32 i64 u8. Offsets are relative to the start
of the payload. The format is plain enough to read from any language.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SCNARR01"

_DTYPE_TAGS = {
    np.dtype("float16"): "f16",
    np.dtype("float32"): "f32",
    np.dtype("float64"): "f64",
    np.dtype("int8"): "i8",
    np.dtype("int16"): "i16",
    np.dtype("int32"): "i32",
    np.dtype("int64"): "i64",
    np.dtype("uint8"): "u8",
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays into the container file."""
    index = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise ValueError(f"array '{name}' has unsupported dtype {arr.dtype}")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append(
            {
                "name": name,
                "dtype": _DTYPE_TAGS[arr.dtype],
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": 1, "meta": meta or {}, "arrays": index}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read (arrays, meta) back from a container file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    payload = raw[16 + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        dtype = _TAG_DTYPES[entry["dtype"]].newbyteorder("<")
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = (
            np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        )
    return arrays, header.get("meta", {})


def save_model(path: str | Path, model: torch.nn.Module, meta: dict | None = None):
    """Store a module's full state dict (parameters and buffers)."""
    arrays = {}
    for name, tensor in model.state_dict().items():
        arrays[name] = tensor.detach().cpu().numpy()
    save_arrays(path, arrays, meta)


def load_model(path: str | Path, model: torch.nn.Module) -> dict:
    """Load a state dict saved by save_model into ``model``; returns meta."""
    arrays, meta = load_arrays(path)
    state = {}
    for name, tensor in model.state_dict().items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing array '{name}'")
        state[name] = torch.as_tensor(arrays[name]).to(tensor.dtype)
    model.load_state_dict(state)
    return meta
