"""Binary checkpoints: config, weights, BN buffers, optimizer state, checksum.

Layout (all integers little-endian)::

    b"FSNN" | version u16 | header_len u32 | header (canonical JSON, UTF-8)
    | 4 tensor sections: params, buffers, adam_m, adam_v
    | fnv1a64 u64 over everything before it

A tensor section is ``count u32`` followed by records
``name_len u16 | name | ndim u8 | dims u32*ndim | float32 payload``.
Serialisation is canonical, so save -> load -> save reproduces the bytes.
"""
import copy
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import CorruptCheckpoint, VersionMismatch

MAGIC = b"FSNN"
FORMAT_VERSION = 1
SECTIONS = ("params", "buffers", "adam_m", "adam_v")


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64_py(data):
    """Reference byte loop; slow, used when numba is unavailable and by the tests."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


try:
    from .kernels._numba import fnv1a64 as checksum
except ImportError:  # pragma: no cover
    checksum = fnv1a64_py


@dataclass
class Checkpoint:
    header: dict
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    @property
    def model_config(self):
        return self.header.get("model", {})

    @property
    def train_config(self):
        return self.header.get("train")

    @property
    def train_state(self):
        return self.header.get("state")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _pack_section(tensors):
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def encode(ckpt):
    header = canonical_json(ckpt.header).encode("utf-8")
    body = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    body += [_pack_section(getattr(ckpt, s)) for s in SECTIONS]
    blob = b"".join(body)
    return blob + struct.pack("<Q", checksum(blob))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode(buf):
    if len(buf) < 18 or buf[:4] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint file (bad magic)")
    blob, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    r = _Reader(blob)
    r.take(4)
    version, hlen = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    if checksum(blob) != stored:
        raise CorruptCheckpoint("checksum mismatch")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"unreadable header: {e}") from None
    sections = {}
    for s in SECTIONS:
        (count,) = r.unpack("<I")
        tensors = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode("utf-8")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        sections[s] = tensors
    if r.pos != len(blob):
        raise CorruptCheckpoint("trailing bytes after the last section")
    return Checkpoint(header, **sections)


def save_checkpoint(path, ckpt):
    data = encode(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def model_tensors(model):
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    buffers = {n: b.copy() for n, b in model.named_buffers()}
    return params, buffers


def make_checkpoint(model, train_cfg=None, state=None, extra=None):
    """Capture ``model`` (and optionally optimizer/train state) as a Checkpoint."""
    params, buffers = model_tensors(model)
    header = {"tool_version": __version__, "model": model.cfg.to_dict(),
              "train": train_cfg.to_dict() if train_cfg is not None else None,
              "state": copy.deepcopy(state.to_dict()) if state is not None else None}
    if extra:
        header.update(extra)
    m = {n: a.copy() for n, a in state.m.items()} if state is not None else {}
    v = {n: a.copy() for n, a in state.v.items()} if state is not None else {}
    return Checkpoint(header, params, buffers, m, v)


def restore_model(model, ckpt):
    """Copy weights and buffers into ``model``; names and shapes must match."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    if set(params) != set(ckpt.params) or set(buffers) != set(ckpt.buffers):
        raise CorruptCheckpoint("checkpoint tensors do not match the model layout")
    for name, p in params.items():
        src = ckpt.params[name]
        if src.shape != p.shape:
            raise CorruptCheckpoint(f"{name}: shape {src.shape} vs model {p.shape}")
        p.data[...] = src
    for name, b in buffers.items():
        b[...] = ckpt.buffers[name]
    return model
