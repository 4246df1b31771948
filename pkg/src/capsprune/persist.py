"""PCPR checkpoints and prune-curve CSV files.

Checkpoint layout (all integers u32 little-endian)::

    b"PCPR" | version | meta_len | meta (UTF-8 JSON)
    then per tensor: name_len | name | rank | dims[rank] | float32 LE data

The JSON metadata holds the model config, the survivor list, the ordered tensor
names and optional training info (epoch, accuracy).
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .capsnet import CapsNetConfig, CapsNetModel
from .errors import (
    CheckpointError,
    CheckpointLengthError,
    CheckpointMagicError,
    CheckpointVersionError,
    SurvivorMismatchError,
)
from .pruning import PruneRecord
from .tensor import Tensor

MAGIC = b"PCPR"
VERSION = 1
CURVE_HEADER = ("n_remaining", "best_accuracy", "flops_pc", "flops_routing", "wall_time_s")


def checkpoint_bytes(model: CapsNetModel, epoch: Optional[int] = None,
                     accuracy: Optional[float] = None, extra: Optional[dict] = None) -> bytes:
    names = list(model.params)
    meta = {
        "config": model.config.to_dict(),
        "survivors": [int(s) for s in model.survivors],
        "tensors": names,
        "epoch": epoch,
        "accuracy": accuracy,
    }
    if extra:
        meta["extra"] = extra
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_raw)))
    buf.write(meta_raw)
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save(model: CapsNetModel, path, **meta) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    data = checkpoint_bytes(model, **meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointLengthError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, {len(self.raw) - self.pos} left"
            )
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def parse_checkpoint(raw: bytes) -> tuple[CapsNetModel, dict]:
    r = _Reader(raw)
    if len(raw) < 4 or r.take(4) != MAGIC:
        raise CheckpointMagicError("not a PCPR checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, supported: {VERSION}")
    meta_raw = r.take(r.u32())
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable metadata: {e}") from None
    params = {}
    while not r.done:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = r.u32(rank) if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        count = int(np.prod(dims))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = Tensor._wrap(arr, requires_grad=True)
    if list(params) != meta.get("tensors"):
        raise CheckpointLengthError(f"tensor section holds {list(params)}, metadata declares {meta.get('tensors')}")
    survivors = np.asarray(meta["survivors"], dtype=np.int64)
    config = CapsNetConfig.from_dict(meta["config"])
    bank = params.get("transform")
    if bank is None or bank.shape[0] != len(survivors):
        raise SurvivorMismatchError(
            f"{len(survivors)} survivors but transform bank has {None if bank is None else bank.shape[0]} rows"
        )
    try:
        model = CapsNetModel(config, params, survivors)
    except Exception as e:
        raise SurvivorMismatchError(str(e)) from None
    return model, meta


def load(path) -> CapsNetModel:
    return parse_checkpoint(Path(path).read_bytes())[0]


def load_with_meta(path) -> tuple[CapsNetModel, dict]:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- curve CSV


def emit_curve(records: Iterable[PruneRecord], path) -> None:
    rows = sorted(records, key=lambda r: -r.n_remaining)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r.n_remaining, repr(float(r.best_accuracy)), r.flops_pc, r.flops_routing,
                        repr(float(r.wall_time_s))])


def read_curve(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if tuple(header or ()) != CURVE_HEADER:
            raise CheckpointError(f"unexpected curve header {header}")
        return [PruneRecord(int(n), float(a), int(fp), int(fr), float(t)) for n, a, fp, fr, t in rd]
