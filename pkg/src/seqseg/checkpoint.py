"""Parameter checkpoints.

Binary layout: 8-byte magic "NLSTM001", one precision byte (4 or 8), then
per-array records: u32 little-endian name length, UTF-8 name, u32 rank,
u32 dims, raw little-endian float payload. Nothing else; integrity is
tracked by a sha256 recorded in the run's training-state sidecar JSON.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"NLSTM001"


class CheckpointError(DataError):
    pass


def save_arrays(path, arrays: dict) -> None:
    """Write named float arrays; precision is taken from the first array."""
    if not arrays:
        raise CheckpointError("refusing to write an empty checkpoint")
    dtypes = {np.dtype(a.dtype) for a in arrays.values()}
    if len(dtypes) != 1 or dtypes.pop() not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise CheckpointError("all arrays must share one float32/float64 dtype")
    first = next(iter(arrays.values()))
    width = first.dtype.itemsize
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", width))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype(f"<f{width}", copy=False).tobytes())


def load_arrays(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(blob) < 9:
        raise CheckpointError(f"{path} is truncated")
    width = blob[8]
    if width not in (4, 8):
        raise CheckpointError(f"{path} has invalid precision flag {width}")
    dtype = np.dtype(f"<f{width}")
    arrays: dict = {}
    off = 9
    try:
        while off < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = count * width
            payload = blob[off:off + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            off += nbytes
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt record structure ({exc})") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    if not arrays:
        raise CheckpointError(f"{path}: no records")
    return arrays


def sha256_of(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Model-level save/load


def save_model(path, net) -> None:
    arrays = {name: p.data for name, p in net.params().items()}
    arrays.update(net.buffers())
    save_arrays(path, arrays)


def load_model(path, net) -> None:
    arrays = load_arrays(path)
    params = net.params()
    buffers = net.buffers()
    expected = set(params) | set(buffers)
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise CheckpointError(
            f"checkpoint does not match the model: missing={missing[:5]} extra={extra[:5]}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} != model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=False)
    net.load_buffers({name: arrays[name] for name in buffers})


def save_model_config(path, model_cfg) -> None:
    Path(path).write_text(json.dumps(model_cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_model_config(path):
    from .network import ModelConfig

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"model config {path} does not exist")
    try:
        return ModelConfig.from_dict(json.loads(path.read_text()))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"invalid model config {path}: {exc}") from exc
