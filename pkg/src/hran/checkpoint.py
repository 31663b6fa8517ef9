"""Little-endian binary checkpoint format.

Layout::

    b"HRANCKPT"  u32 version (=1)
    config: u32 scale, u32 C, u32 R, u32 B, u32 r, u32 fusion (0=bff, 1=hff), f32 leaky_slope
    u32 count, then per tensor:
        u16 name length, UTF-8 name, u8 rank, rank x u32 dims, raw f32 data
    optional optimizer section (training checkpoints):
        u32 count, tensors named ``<param>.adam.m`` / ``<param>.adam.v``,
        u64 iteration, u64 rng_state

Writes are atomic (temporary file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ParamStore, check_store

MAGIC = b"HRANCKPT"
VERSION = 1
_CONFIG = struct.Struct("<6If")


@dataclass
class Checkpoint:
    cfg: ModelConfig
    store: ParamStore
    iteration: int | None = None
    rng_state: int | None = None

    @property
    def has_optimizer(self) -> bool:
        return self.iteration is not None


def _f32(x: float) -> float:
    return float(np.float32(x))


def configs_match(a: ModelConfig, b: ModelConfig) -> bool:
    """Equality over the fields a checkpoint records."""
    key = lambda c: (c.scale, c.channels, c.rg_count, c.hrab_per_rg, c.ca_reduction,
                     c.fusion_mode, _f32(c.leaky_slope))
    return key(a) == key(b)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name[:40]}...")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode(cfg: ModelConfig, store: ParamStore, iteration: int | None = None, rng_state: int | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_CONFIG.pack(cfg.scale, cfg.channels, cfg.rg_count, cfg.hrab_per_rg,
                              cfg.ca_reduction, 0 if cfg.fusion_mode == "bff" else 1, cfg.leaky_slope))
    parts.append(struct.pack("<I", len(store)))
    for name, p in store.items():
        parts.append(_pack_tensor(name, p.value))
    if iteration is not None:
        parts.append(struct.pack("<I", 2 * len(store)))
        for name, p in store.items():
            parts.append(_pack_tensor(f"{name}.adam.m", p.m))
            parts.append(_pack_tensor(f"{name}.adam.v", p.v))
        parts.append(struct.pack("<QQ", iteration, rng_state or 0))
    return b"".join(parts)


def save_checkpoint(path, cfg, store, iteration=None, rng_state=None) -> None:
    data = encode(cfg, store, iteration, rng_state)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def tensor(self):
        (n,) = self.unpack("<H", "tensor name length")
        try:
            name = self.take(n, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor name is not UTF-8 at byte offset {self.pos - n}") from None
        (rank,) = self.unpack("<B", f"rank of {name}")
        dims = self.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count, f"data of {name}"), dtype="<f4")
        return name, data.reshape(dims).astype(np.float32)


def decode(buf: bytes, expect: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not an HRAN checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    scale, C, R, B, red, fusion, slope = r.unpack(_CONFIG.format, "config block")
    if fusion not in (0, 1):
        raise CheckpointError(f"unknown fusion mode code {fusion}")
    cfg = ModelConfig(scale=scale, channels=C, rg_count=R, hrab_per_rg=B, ca_reduction=red,
                      fusion_mode="bff" if fusion == 0 else "hff",
                      leaky_slope=float(f"{slope:.7g}"))
    if expect is not None and not configs_match(cfg, expect):
        raise CheckpointError(f"checkpoint config {cfg} does not match requested {expect}")
    (count,) = r.unpack("<I", "tensor count")
    store = ParamStore()
    for _ in range(count):
        name, arr = r.tensor()
        store.add(name, arr)
    try:
        check_store(cfg, store)
    except Exception as exc:
        raise CheckpointError(f"checkpoint tensors inconsistent with its config: {exc}") from None
    ckpt = Checkpoint(cfg, store)
    if r.pos == len(buf):
        return ckpt
    (count,) = r.unpack("<I", "optimizer tensor count")
    for _ in range(count):
        name, arr = r.tensor()
        base, _, kind = name.rpartition(".adam.")
        if kind not in ("m", "v") or base not in store:
            raise CheckpointError(f"unexpected optimizer tensor {name!r}")
        target = getattr(store[base], kind)
        if target.shape != arr.shape:
            raise CheckpointError(f"optimizer tensor {name!r} has shape {arr.shape}, expected {target.shape}")
        target[...] = arr
    ckpt.iteration, ckpt.rng_state = r.unpack("<QQ", "optimizer trailer")
    if r.pos != len(buf):
        raise CheckpointError(f"trailing bytes after checkpoint at byte offset {r.pos}")
    return ckpt


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(buf, expect)
