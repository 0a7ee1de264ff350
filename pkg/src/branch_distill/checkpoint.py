"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BDKD" | u32 version | u32 len | arch descriptor (UTF-8 JSON)
    repeated: u32 len | name (UTF-8) | u8 dtype tag | u32 rank | u32 extents... | raw values

Metadata (epoch, RNG state) travels as ordinary records so the file is one
flat sequence of named arrays.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import DataError

MAGIC = b"BDKD"
VERSION = 1

_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_DTYPES = {tag: dt for dt, tag in _TAGS.items()}

EPOCH_KEY = "meta/epoch"
RNG_KEY = "meta/rng"


@dataclass
class Checkpoint:
    arch: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: Optional[dict] = None
    version: int = VERSION

    def section(self, prefix):
        """Records under ``prefix/`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def _u32(n):
    return struct.pack("<I", n)


def _encode_array(name, arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _TAGS:
        raise DataError(f"checkpoint record {name!r}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    parts = [_u32(len(raw_name)), raw_name, struct.pack("<B", _TAGS[dt]), _u32(arr.ndim)]
    parts.extend(_u32(s) for s in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def to_bytes(ckpt):
    desc = json.dumps(ckpt.arch, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, _u32(ckpt.version), _u32(len(desc)), desc]
    for name, arr in ckpt.tensors.items():
        chunks.append(_encode_array(name, arr))
    chunks.append(_encode_array(EPOCH_KEY, np.array([ckpt.epoch], dtype=np.int64)))
    if ckpt.rng_state is not None:
        blob = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
        chunks.append(_encode_array(RNG_KEY, np.frombuffer(blob, dtype=np.uint8)))
    return b"".join(chunks)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.path}: truncated {what} at byte {self.pos}, need {n} bytes, {len(self.raw) - self.pos} left")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def from_bytes(raw, path="<bytes>"):
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version} at byte 4")
    arch = json.loads(r.take(r.u32("descriptor length"), "arch descriptor").decode("utf-8"))
    ckpt = Checkpoint(arch=arch, version=version)
    while r.pos < len(raw):
        start = r.pos
        name = r.take(r.u32("name length"), "record name").decode("utf-8")
        tag = r.take(1, "dtype tag")[0]
        if tag not in _DTYPES:
            raise DataError(f"{path}: record {name!r} at byte {start} has unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        rank = r.u32("rank")
        shape = tuple(r.u32("extent") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize, f"values of {name!r}"), dtype=dt).reshape(shape).copy()
        if name == EPOCH_KEY:
            ckpt.epoch = int(arr[0])
        elif name == RNG_KEY:
            ckpt.rng_state = json.loads(arr.tobytes().decode("utf-8"))
        else:
            ckpt.tensors[name] = arr
    return ckpt


def save_checkpoint(ckpt, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise DataError(f"{path}: cannot write checkpoint ({exc.strerror or exc})") from exc
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    return from_bytes(path.read_bytes(), path)


# --------------------------------------------------------------------------
# module state
# --------------------------------------------------------------------------


def module_state(module, prefix):
    out = {}
    for name, p in module.named_parameters():
        out[f"{prefix}/param/{name}"] = p.data
    for name, b in module.named_buffers():
        out[f"{prefix}/buffer/{name}"] = b
    return out


def load_module_state(module, ckpt, prefix):
    """Copy stored arrays into ``module`` in place; every slot must be present."""
    for kind, items in (("param", module.named_parameters()), ("buffer", module.named_buffers())):
        for name, slot in items:
            key = f"{prefix}/{kind}/{name}"
            if key not in ckpt.tensors:
                raise DataError(f"checkpoint has no record {key!r}")
            value = ckpt.tensors[key]
            target = slot.data if kind == "param" else slot
            if value.shape != target.shape:
                raise DataError(f"record {key!r} has shape {value.shape}, model expects {target.shape}")
            target[...] = value
    return module
