"""CDIF checkpoint files.

Layout (all integers little-endian)::

    b"CDIF" | version u32 | header_len u32 | header JSON (UTF-8)
    | weights f32... | ema f32... | adam m f32... | adam v f32... | crc32 u32

Arrays follow the layer order recorded in the header. The CRC covers every
byte before it.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .net import NetConfig, NetParams
from .tensor import atomic_write

MAGIC = b"CDIF"
VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def checkpoint_bytes(params: NetParams, meta: dict | None = None) -> bytes:
    names = list(params.weights)
    header = dict(meta or {})
    header.update(net=asdict(params.config), step=params.step,
                  layers=[[n, list(params.weights[n].shape)] for n in names])
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for group in (params.weights, params.ema, params.m, params.v):
        for n in names:
            chunks.append(np.ascontiguousarray(group[n], dtype="<f4").tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[NetParams, dict]:
    if len(buf) < 16:
        raise TruncatedError(f"{source}: truncated checkpoint ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a CDIF checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionError(f"{source}: checkpoint version {version}, this build reads version {VERSION}")
    if len(buf) < 12 + hlen + 4:
        raise TruncatedError(f"{source}: truncated header")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc
    layers = [(n, tuple(s)) for n, s in header["layers"]]
    need = 12 + hlen + 4 * 4 * sum(int(np.prod(s)) for _, s in layers) + 4
    if len(buf) < need:
        raise TruncatedError(f"{source}: truncated payload ({len(buf)} of {need} bytes)")
    (crc,) = struct.unpack_from("<I", buf, need - 4)
    if zlib.crc32(buf[: need - 4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{source}: CRC mismatch")
    off = 12 + hlen
    groups = []
    for _ in range(4):
        g = {}
        for n, shape in layers:
            size = int(np.prod(shape))
            g[n] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
        groups.append(g)
    cfg = NetConfig(**header["net"])
    params = NetParams(cfg, *groups, step=int(header["step"]))
    return params, header


def save_checkpoint(path, params: NetParams, meta: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(params, meta))


def load_checkpoint(path) -> tuple[NetParams, dict]:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))
