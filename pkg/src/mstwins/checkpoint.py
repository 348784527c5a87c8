"""Versioned binary checkpoints and named-tensor weight import.

Layout (little-endian)::

    "MST1" | u32 version | u32 n + n bytes UTF-8 text | u32 count |
    count x ( u32 n + n bytes UTF-8 name | .tns tensor )

The text block is the flat run config followed by ``meta.*`` lines whose
values are JSON (optimizer scalars, rng state, metric history).
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .data import FormatError, read_tns_from, write_tns_to

log = logging.getLogger(__name__)

MAGIC = b"MST1"
VERSION = 1
VELOCITY_PREFIX = "optim.velocity."


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict  # name -> ndarray, in model order
    velocity: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def history(self) -> list:
        return self.meta.get("history", [])


def _put_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _get_str(fh) -> str:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated string length")
    (n,) = struct.unpack("<I", raw)
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("truncated string")
    return b.decode("utf-8")


def _write_records(buf: io.BytesIO, tensors: dict) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _put_str(buf, name)
        write_tns_to(buf, np.asarray(arr, dtype=np.float64))


def _read_records(fh) -> dict:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated record count")
    (count,) = struct.unpack("<I", raw)
    out = {}
    for _ in range(count):
        name = _get_str(fh)
        out[name] = read_tns_from(fh)
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    text = config_mod.dumps(ckpt.config)
    text += "".join(f"meta.{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in ckpt.meta.items())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    _put_str(buf, text)
    tensors = dict(ckpt.params)
    tensors.update({VELOCITY_PREFIX + k: v for k, v in ckpt.velocity.items()})
    _write_records(buf, tensors)
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    fh = io.BytesIO(data)
    if fh.read(4) != MAGIC:
        raise FormatError("not an MST1 checkpoint")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated version")
    (version,) = struct.unpack("<I", raw)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries = config_mod.parse_text(_get_str(fh))
    meta = {k[5:]: json.loads(v) for k, v in entries.items() if k.startswith("meta.")}
    cfg = config_mod.from_flat({k: v for k, v in entries.items() if not k.startswith("meta.")})
    tensors = _read_records(fh)
    params = {k: v for k, v in tensors.items() if not k.startswith(VELOCITY_PREFIX)}
    velocity = {k[len(VELOCITY_PREFIX):]: v for k, v in tensors.items() if k.startswith(VELOCITY_PREFIX)}
    return Checkpoint(cfg, params, velocity, meta, version)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# weight import
# ---------------------------------------------------------------------------

@dataclass
class ImportReport:
    loaded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (name, reason)

    @property
    def count(self) -> int:
        return len(self.loaded)

    def __str__(self) -> str:
        lines = [f"loaded {self.count} tensors, skipped {len(self.skipped)}"]
        lines += [f"  skipped {name}: {why}" for name, why in self.skipped]
        return "\n".join(lines)


def read_named_tensors(path) -> dict:
    """Named arrays from an MST1 checkpoint or a numpy ``.npz`` archive; an empty file holds none."""
    raw = Path(path).read_bytes()
    if not raw:
        return {}
    if raw[:4] == MAGIC:
        return from_bytes(raw).params
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except Exception as exc:
        raise FormatError(f"{path}: not a checkpoint or named-tensor archive ({exc})") from None


def import_weights(source: Union[str, Path, Checkpoint, dict], model) -> ImportReport:
    """Copy every tensor whose name and shape match a model parameter."""
    if isinstance(source, Checkpoint):
        tensors = source.params
    elif isinstance(source, dict):
        tensors = source
    else:
        tensors = read_named_tensors(source)
    params = dict(model.named_parameters())
    report = ImportReport()
    for name, arr in tensors.items():
        p = params.get(name)
        if p is None:
            report.skipped.append((name, "no parameter with this name"))
        elif tuple(arr.shape) != p.shape:
            report.skipped.append((name, f"shape {tuple(arr.shape)} != {p.shape}"))
        else:
            p.data = np.array(arr, dtype=np.float64)
            report.loaded.append(name)
    for name, why in report.skipped:
        log.info("import_weights: skipped %s (%s)", name, why)
    return report
