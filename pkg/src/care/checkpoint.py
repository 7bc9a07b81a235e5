"""Checkpoint file format.

Layout (little-endian)::

    b"CAREckpt"  u32 version  u64 json_len  json (UTF-8)
    repeated:  u16 name_len  name  u8 rank  u32 dims[rank]  f32 payload

The JSON header lists every tensor name, so a file cut exactly at a tensor
boundary is still reported as truncated.
"""

from __future__ import annotations

import io
import json
import os
import struct
from collections import OrderedDict
from typing import BinaryIO

import numpy as np

from care.errors import FormatError
from care.models import ModelConfig
from care.training import CHECKPOINT_VERSION, Checkpoint, TrainConfig

MAGIC = b"CAREckpt"


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = [f"member{i}.{name}" for i, state in enumerate(ckpt.members) for name in state]
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "log": ckpt.log,
        "normalization": ckpt.normalization,
        "members": len(ckpt.members),
        "tensors": names,
    }
    hdr = _json_bytes(header)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hdr)))
    buf.write(hdr)
    for i, state in enumerate(ckpt.members):
        for name, arr in state.items():
            key = f"member{i}.{name}".encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            buf.write(struct.pack("<H", len(key)))
            buf.write(key)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, f: BinaryIO):
        self.f = f
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise FormatError(f"truncated file at offset {self.offset}: expected {n} bytes of {what}, got {len(data)}")
        self.offset += n
        return data

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f)
        magic = r.read(len(MAGIC), "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
        (version,) = r.unpack("<I", "version")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} at offset {len(MAGIC)} (reader supports {CHECKPOINT_VERSION})")
        (hlen,) = r.unpack("<Q", "header length")
        start = r.offset
        try:
            header = json.loads(r.read(hlen, "JSON header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt JSON header at offset {start}: {exc}") from None

        tensors = OrderedDict()
        for expected in header["tensors"]:
            at = r.offset
            (nlen,) = r.unpack("<H", "tensor name length")
            name = r.read(nlen, "tensor name").decode("utf-8")
            if name != expected:
                raise FormatError(f"unexpected tensor {name!r} at offset {at}, expected {expected!r}")
            (rank,) = r.unpack("<B", "rank")
            dims = r.unpack(f"<{rank}I", "dims")
            count = int(np.prod(dims, dtype=np.int64))
            payload = r.read(4 * count, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"unexpected trailing data at offset {r.offset}")

    members = []
    for i in range(header["members"]):
        prefix = f"member{i}."
        members.append(OrderedDict((k[len(prefix):], v) for k, v in tensors.items() if k.startswith(prefix)))
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        members=members,
        log=header["log"],
        normalization=header["normalization"],
        version=version,
    )
