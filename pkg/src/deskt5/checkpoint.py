"""On-disk checkpoints: a JSON manifest plus little-endian binary blob files.

Layout of a checkpoint directory::

    manifest.json   human-readable metadata, blob index, RNG state
    params.bin      model parameters
    optimizer.bin   optimizer accumulators

Each blob record is self-describing::

    u32 name_len | name (utf-8) | u32 ndim | u64 dims[ndim] | u8 itemsize | payload

with the payload stored as little-endian IEEE-754 (float32 or float64).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_shapes
from .optim import OptimizerState

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class CheckpointError(Exception):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    step: int
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer_kind: str
    optimizer_state: OptimizerState
    rng_state: dict = field(default_factory=dict)
    data_cursor: int = 0
    kind: str = "pretrain"
    vocab: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def _encode_blob(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype not in (np.float32, np.float64):
        raise CheckpointError(f"blob {name!r} has unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", arr.dtype.itemsize)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def _write_blobs(path: Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    index = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            blob = _encode_blob(name, arr)
            fh.write(blob)
            index.append(
                {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(blob)}
            )
            offset += len(blob)
    return index


def _read_blobs(path: Path, index: list[dict]) -> dict[str, np.ndarray]:
    data = path.read_bytes()
    out = {}
    for entry in index:
        name, off = entry["name"], entry["offset"]
        try:
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            stored = data[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            (itemsize,) = struct.unpack_from("<B", data, off)
            off += 1
        except struct.error:
            raise TruncatedBlobError(f"{path.name}: header of blob {name!r} is truncated") from None
        if stored != name:
            raise CheckpointError(f"{path.name}: expected blob {name!r}, found {stored!r}")
        if list(shape) != list(entry["shape"]):
            raise ShapeMismatchError(f"blob {name!r}: manifest shape {entry['shape']} but blob header {list(shape)}")
        dtype = np.dtype("<f4" if itemsize == 4 else "<f8")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * itemsize
        if off + nbytes > len(data):
            raise TruncatedBlobError(f"{path.name}: payload of blob {name!r} is truncated")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    param_index = _write_blobs(path / "params.bin", ckpt.params)
    optim_index = _write_blobs(path / "optimizer.bin", ckpt.optimizer_state.arrays())
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "step": ckpt.step,
        "data_cursor": ckpt.data_cursor,
        "model_config": ckpt.model_config.to_dict(),
        "vocab": ckpt.vocab,
        "optimizer": {"kind": ckpt.optimizer_kind, "step": ckpt.optimizer_state.step},
        "rng_state": ckpt.rng_state,
        "config": ckpt.config,
        "metrics": ckpt.metrics,
        "blobs": {"params.bin": param_index, "optimizer.bin": optim_index},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version!r}; this build reads {FORMAT_VERSION}")
    model_config = ModelConfig(**manifest["model_config"])
    expected = param_shapes(model_config)
    param_index = manifest["blobs"]["params.bin"]
    names = [e["name"] for e in param_index]
    if sorted(names) != sorted(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise ShapeMismatchError(f"parameter set differs from model config (missing {missing}, unexpected {extra})")
    for entry in param_index:
        if tuple(entry["shape"]) != expected[entry["name"]]:
            raise ShapeMismatchError(
                f"parameter {entry['name']!r}: checkpoint shape {entry['shape']} "
                f"but model config needs {list(expected[entry['name']])}"
            )
    params = _read_blobs(path / "params.bin", param_index)
    optim_arrays = _read_blobs(path / "optimizer.bin", manifest["blobs"]["optimizer.bin"])
    opt = manifest["optimizer"]
    return Checkpoint(
        step=manifest["step"],
        model_config=model_config,
        params=params,
        optimizer_kind=opt["kind"],
        optimizer_state=OptimizerState.from_arrays(opt["step"], optim_arrays),
        rng_state=manifest["rng_state"],
        data_cursor=manifest["data_cursor"],
        kind=manifest["kind"],
        vocab=manifest["vocab"],
        config=manifest["config"],
        metrics=manifest["metrics"],
    )
