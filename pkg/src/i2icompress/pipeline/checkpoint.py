"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IICKPT01"                    magic
    u32 version                    currently 1
    u32 element width              4 or 8 bytes
    u32 L, L bytes                 UTF-8 ``key = value`` header (architecture, active_depth, T, extras)
    u32 count                      number of tensors
    count x (u32 len, name, u32 rank, rank x u64 dims, values)
    8 bytes                        blake2b-64 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..denoiser import DenoiserModel, UNetConfig
from ..numerics import Tensor

MAGIC = b"IICKPT01"
VERSION = 1
_DTYPES = {4: "<f4", 8: "<f8"}


class CheckpointError(ValueError):
    pass


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _header(model: DenoiserModel, extra: dict[str, str] | None) -> str:
    lines = {f"unet.{k}": v for k, v in model.config.to_dict().items()}
    lines["unet.channel_mults"] = ",".join(str(m) for m in model.config.channel_mults)
    lines["active_depth"] = model.active_depth
    lines["num_timesteps"] = model.num_timesteps
    for k, v in (extra or {}).items():
        lines[f"meta.{k}"] = v
    return "".join(f"{k} = {v}\n" for k, v in lines.items())


def dumps(model: DenoiserModel, extra: dict[str, str] | None = None) -> bytes:
    widths = {p.data.dtype.itemsize for p in model.params.values()}
    if len(widths) != 1 or next(iter(widths)) not in _DTYPES:
        raise CheckpointError(f"parameters must share one 32- or 64-bit float type, got widths {widths}")
    width = widths.pop()
    head = _header(model, extra).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", VERSION, width, len(head)), head, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype=_DTYPES[width]).tobytes())
    body = b"".join(parts)
    return body + checksum(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def loads(data: bytes) -> tuple[DenoiserModel, dict[str, str]]:
    """Parse a checkpoint; returns the model and the ``meta.*`` header entries."""
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, tail = data[:-8], data[-8:]
    if checksum(body) != tail:
        raise CheckpointError("checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, width, head_len = r.unpack("<III")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if width not in _DTYPES:
        raise CheckpointError(f"unsupported element width {width}")
    head = _parse_header(r.take(head_len).decode("utf-8"))
    cfg = UNetConfig(
        image_size=int(head["unet.image_size"]),
        in_channels=int(head["unet.in_channels"]),
        cond_channels=int(head["unet.cond_channels"]),
        out_channels=int(head["unet.out_channels"]),
        base_channels=int(head["unet.base_channels"]),
        channel_mults=tuple(int(v) for v in head["unet.channel_mults"].split(",")),
        blocks_per_level=int(head["unet.blocks_per_level"]),
        time_embed_dim=int(head["unet.time_embed_dim"]),
    )
    (count,) = r.unpack("<I")
    params = {}
    dtype = np.dtype(_DTYPES[width])
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(size * width), dtype=dtype).reshape(shape)
        native = dtype.newbyteorder("=")
        params[name] = Tensor(arr.astype(native, copy=True), requires_grad=True, dtype=native)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    model = DenoiserModel(cfg, params, int(head["active_depth"]), int(head["num_timesteps"]))
    meta = {k[5:]: v for k, v in head.items() if k.startswith("meta.")}
    return model, meta


def save(model: DenoiserModel, path: str | Path, extra: dict[str, str] | None = None) -> bytes:
    data = dumps(model, extra)
    Path(path).write_bytes(data)
    return data


def load(path: str | Path) -> tuple[DenoiserModel, dict[str, str]]:
    return loads(Path(path).read_bytes())
