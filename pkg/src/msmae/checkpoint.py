"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  "PM2A"
    version u16      currently 1
    config  u32 length + utf-8 key=value text (ModelConfig)
    params  u32 record count, then records
    optflag u8       0 = no optimizer section
    [step   u64, epoch u64, m-table, v-table]   when optflag == 1
    auxflag u8       0 = no auxiliary table
    [aux-table]      extra named arrays (e.g. classifier head) when 1

A record is: name (u16 length + utf-8), rank (u8), extents (rank x u32),
then the raw float32 payload. Values are stored verbatim, so a save/load
cycle is bit-exact. Malformed files raise ParseError naming the absolute
byte offset where reading failed.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from . import tensor as T
from .errors import ContractError, ParseError
from .model import ModelConfig, param_shapes

MAGIC = b"PM2A"
VERSION = 1


def _pack_str(s):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ContractError(f"name too long for container: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def _pack_record(name, arr):
    if arr.dtype != np.float32:
        raise ContractError(f"checkpoint stores float32 only; {name} is {arr.dtype}")
    if arr.ndim > 0xFF:
        raise ContractError(f"{name}: rank {arr.ndim} exceeds container limit")
    head = _pack_str(name) + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _pack_table(items):
    body = struct.pack("<I", len(items))
    for name, arr in items:
        body += _pack_record(name, arr)
    return body


class _Cursor:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise ParseError(
                f"{self.path}: truncated while reading {what} at byte {self.off} "
                f"(wanted {n} bytes, file has {len(self.blob)})"
            )
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what):
        n = self.u16(f"{what} length")
        return self.take(n, what).decode("utf-8")


def _read_table(cur, what):
    count = cur.u32(f"{what} count")
    out = {}
    for i in range(count):
        name = cur.string(f"{what} record {i} name")
        rank = cur.u8(f"{name} rank")
        shape = tuple(cur.u32(f"{name} extent") for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        raw = cur.take(4 * n_items, f"{name} payload")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out


def save_checkpoint(path, config, params, optimizer=None, aux=None):
    """Write config + parameters (+ optional optimizer/aux tables) atomically.

    optimizer, when given, is {"step": int, "epoch": int, "m": {name: arr},
    "v": {name: arr}} with float32 arrays matching the parameter shapes.
    aux is a free name->float32-array table (classifier heads and such).
    """
    blob = MAGIC + struct.pack("<H", VERSION)
    text = config.to_text().encode("utf-8")
    blob += struct.pack("<I", len(text)) + text
    names = list(param_shapes(config))
    missing = [n for n in names if n not in params]
    if missing:
        raise ContractError(f"params missing {missing[:3]} for this config")
    blob += _pack_table([(n, params[n].data) for n in names])
    if optimizer is None:
        blob += struct.pack("<B", 0)
    else:
        blob += struct.pack("<B", 1)
        blob += struct.pack("<Q", int(optimizer["step"]))
        blob += struct.pack("<Q", int(optimizer["epoch"]))
        blob += _pack_table([(n, optimizer["m"][n]) for n in names])
        blob += _pack_table([(n, optimizer["v"][n]) for n in names])
    if aux is None:
        blob += struct.pack("<B", 0)
    else:
        arrs = {n: (np.asarray(a) if isinstance(a, np.ndarray) else a.data) for n, a in aux.items()}
        blob += struct.pack("<B", 1) + _pack_table(sorted(arrs.items()))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a container; returns (config, params, optimizer-or-None, aux-or-None).

    Parameters come back as float32 Tensors with requires_grad set, in the
    canonical creation order, verified against the embedded config.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise ParseError(f"{path}: cannot read checkpoint ({e.strerror})") from e
    cur = _Cursor(blob, str(path))
    if cur.take(4, "magic") != MAGIC:
        raise ParseError(f"{path}: bad magic at byte 0, not a checkpoint container")
    version = cur.u16("version")
    if version != VERSION:
        raise ParseError(f"{path}: unsupported container version {version} at byte 4")
    text = cur.take(cur.u32("config length"), "config text").decode("utf-8")
    config = ModelConfig.from_text(text)
    table = _read_table(cur, "parameter")
    expected = param_shapes(config)
    if set(table) != set(expected):
        gone = sorted(set(expected) - set(table))[:3]
        alien = sorted(set(table) - set(expected))[:3]
        raise ParseError(f"{path}: parameter table mismatch (missing {gone}, unexpected {alien})")
    for name, shape in expected.items():
        if table[name].shape != tuple(shape):
            raise ParseError(f"{path}: {name} has shape {table[name].shape}, config wants {tuple(shape)}")
    params = {n: T.tensor(table[n], requires_grad=True) for n in expected}
    optimizer = None
    if cur.u8("optimizer flag") == 1:
        step = cur.u64("optimizer step")
        epoch = cur.u64("optimizer epoch")
        m = _read_table(cur, "first-moment")
        v = _read_table(cur, "second-moment")
        for part, label in ((m, "first"), (v, "second")):
            if set(part) != set(expected):
                raise ParseError(f"{path}: {label}-moment table does not match parameters")
        optimizer = {"step": step, "epoch": epoch, "m": m, "v": v}
    aux = None
    if cur.u8("aux flag") == 1:
        aux = _read_table(cur, "auxiliary")
    if cur.off != len(blob):
        raise ParseError(f"{path}: {len(blob) - cur.off} trailing bytes after byte {cur.off}")
    return config, params, optimizer, aux
