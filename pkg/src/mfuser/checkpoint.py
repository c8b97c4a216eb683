"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"MFCKPT\\0\\0"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    u32 n_sections, then per section:
        u32 name_len  name  u32 n_records
        per record: u32 name_len  name  u32 rank  u64 dims[rank]  f64 payload

Sections are ``frozen`` and ``trainable``. Float payloads are written and read
as ``<f8`` so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import Module
from .tensor import ContractError, Tensor

MAGIC = b"MFCKPT\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed file or mismatch between a checkpoint and a model."""


def _w_u32(f, v):
    f.write(struct.pack("<I", v))


def _w_str(f, s: str):
    b = s.encode("utf-8")
    _w_u32(f, len(b))
    f.write(b)


def save_tensors(path, sections: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        _w_u32(f, VERSION)
        _w_str(f, json.dumps(meta or {}, sort_keys=True))
        _w_u32(f, len(sections))
        for sec, records in sections.items():
            _w_str(f, sec)
            _w_u32(f, len(records))
            for name, arr in records.items():
                arr = np.array(arr, dtype="<f8", order="C")
                _w_str(f, name)
                _w_u32(f, arr.ndim)
                f.write(np.asarray(arr.shape, dtype="<u8").tobytes())
                f.write(arr.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_tensors(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.str())
    sections = {}
    for _ in range(r.u32()):
        sec = r.str()
        records = {}
        for _ in range(r.u32()):
            name = r.str()
            rank = r.u32()
            shape = tuple(int(d) for d in np.frombuffer(r.take(8 * rank), dtype="<u8"))
            count = int(np.prod(shape)) if rank else 1
            records[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        sections[sec] = records
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    return sections, meta


def module_sections(model: Module, trainable: list[Tensor] | None = None) -> dict[str, dict[str, np.ndarray]]:
    """Split a module's tensors into frozen and trainable sections by name."""
    train_ids = {id(t) for t in (trainable if trainable is not None else model.parameters())}
    frozen, train = {}, {}
    for name, t in model.named_tensors():
        (train if id(t) in train_ids else frozen)[name] = t.data
    return {"frozen": frozen, "trainable": train}


def save_checkpoint(path, model: Module, meta: dict | None = None, trainable: list[Tensor] | None = None) -> None:
    save_tensors(path, module_sections(model, trainable), meta)


def load_into(model: Module, sections: dict[str, dict[str, np.ndarray]], check_frozen: bool = True) -> None:
    """Copy the trainable section into ``model``; verify the frozen section matches bit for bit."""
    named = dict(model.named_tensors())
    for name, arr in sections.get("trainable", {}).items():
        if name not in named:
            raise CheckpointError(f"checkpoint tensor {name!r} not present in model")
        t = named[name]
        if t.shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
        t.data = arr.copy()
    if check_frozen:
        for name, arr in sections.get("frozen", {}).items():
            t = named.get(name)
            if t is None or t.shape != arr.shape or not np.array_equal(t.data, arr):
                raise ContractError(f"frozen tensor {name!r} differs from the checkpoint")
