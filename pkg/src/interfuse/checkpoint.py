"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"IFUSECKP"
    version    uint32    FORMAT_VERSION
    header_len uint64    byte length of the JSON header
    header     UTF-8 JSON, keys sorted:
                 {"meta": {...},
                  "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    data       tensors back to back, row-major, little-endian;
               "offset" counts from the first data byte

Writing the same arrays and metadata always produces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"IFUSECKP"
FORMAT_VERSION = 1
_DTYPES = {"float32", "float64", "int64", "uint8", "int32"}


def write_container(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")  # tobytes copies row-major
        index.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
            fh.write(header)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    start = 8 + 12
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc
    base = start + header_len
    arrays = {}
    for t in header["tensors"]:
        buf = raw[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        if len(buf) != t["nbytes"]:
            raise CheckpointError(f"{path} is truncated at tensor {t['name']}")
        dtype = np.dtype(t["dtype"]).newbyteorder("<")
        arrays[t["name"]] = np.frombuffer(buf, dtype=dtype).reshape(t["shape"]).astype(t["dtype"])
    return arrays, header["meta"]


def state_to_arrays(state: dict[str, torch.Tensor], prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in state.items()}


def save_model(path, model, meta: dict | None = None, extra_arrays: dict | None = None) -> Path:
    """Model weights + config echo (+ any extra named arrays, e.g. optimizer state)."""
    arrays = state_to_arrays(model.state_dict(), prefix="model/")
    arrays.update(extra_arrays or {})
    meta = dict(meta or {})
    meta["model_config"] = model.config.to_dict()
    return write_container(path, arrays, meta)


def load_model(path, dtype=torch.float32):
    """Rebuild a :class:`~interfuse.model.FusionNet` from a checkpoint; returns ``(model, meta, arrays)``."""
    from .model import FusionNet, ModelConfig

    arrays, meta = read_container(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path} carries no model configuration")
    model = FusionNet(ModelConfig.from_dict(meta["model_config"]), seed=None)
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
             if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the stored config: {exc}") from exc
    model.to(dtype)
    model.eval()
    return model, meta, arrays
