"""Binary model checkpoints: config, parameters, and both codebooks.

Little-endian layout:

    magic   4s   "TATK"
    version u32  (currently 1)
    config  u32 x 10: token_dim, num_global, depth, patch_size,
                 codebook_size, patch_code_dim, global_code_dim,
                 image_height, image_width, channels
            f64  overlap_rate
            u64  seed
    tensors      records in the fixed order of Params.named_arrays(),
                 then per codebook (patch first, then global):
                 entries, ema_count, ema_sum
    record       u32 rank, u32 x rank dims, f64 x prod(dims) payload

The model checksum referenced by token streams is CRC32 over the
concatenated tensor payload bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import ParseError
from .nanonet import ModelConfig, Params, init_params
from .quantizer import Codebook, init_codebooks

__all__ = ["save_checkpoint", "load_checkpoint", "model_checksum"]

MAGIC = b"TATK"
VERSION = 1

_CONFIG_U32_FIELDS = (
    "token_dim", "num_global", "depth", "patch_size", "codebook_size",
    "patch_code_dim", "global_code_dim", "image_height", "image_width",
    "channels",
)


def _iter_tensors(params: Params, patch_cb: Codebook, global_cb: Codebook):
    yield from params.named_arrays()
    for cb in (patch_cb, global_cb):
        yield f"{cb.kind}_entries", cb.entries
        yield f"{cb.kind}_ema_count", cb.ema_count
        yield f"{cb.kind}_ema_sum", cb.ema_sum


def _tensor_record(arr: np.ndarray) -> bytes:
    dims = arr.shape
    head = struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _payload_bytes(params: Params, patch_cb: Codebook, global_cb: Codebook) -> bytes:
    return b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for _, arr in _iter_tensors(params, patch_cb, global_cb)
    )


def model_checksum(params: Params, patch_cb: Codebook, global_cb: Codebook) -> int:
    """CRC32 of every tensor payload, identifying this exact model state."""
    return zlib.crc32(_payload_bytes(params, patch_cb, global_cb)) & 0xFFFFFFFF


def save_checkpoint(path, params: Params, patch_cb: Codebook, global_cb: Codebook) -> None:
    cfg = params.cfg
    blob = [MAGIC, struct.pack("<I", VERSION)]
    blob.append(
        struct.pack("<10I", *(getattr(cfg, f) for f in _CONFIG_U32_FIELDS))
    )
    blob.append(struct.pack("<d", cfg.overlap_rate))
    blob.append(struct.pack("<Q", cfg.seed))
    for _, arr in _iter_tensors(params, patch_cb, global_cb):
        blob.append(_tensor_record(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self, expected_shape) -> np.ndarray:
        rank = self.u32()
        if rank > 4:
            raise ParseError(f"implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        if tuple(dims) != tuple(expected_shape):
            raise ParseError(f"tensor shape {dims} != expected {tuple(expected_shape)}")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8")
        return data.reshape(dims).astype(np.float64)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, patch_codebook, global_codebook)."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise ParseError("not a model checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    u32s = [reader.u32() for _ in range(10)]
    overlap_rate = struct.unpack("<d", reader.take(8))[0]
    seed = struct.unpack("<Q", reader.take(8))[0]
    cfg = ModelConfig(
        overlap_rate=overlap_rate,
        seed=seed,
        **dict(zip(_CONFIG_U32_FIELDS, u32s)),
    )

    # template objects define every expected tensor shape
    params = init_params(cfg)
    patch_cb, global_cb = init_codebooks(cfg)
    loaded = {}
    for name, arr in _iter_tensors(params, patch_cb, global_cb):
        loaded[name] = reader.tensor(arr.shape)
    if reader.pos != len(reader.buf):
        raise ParseError(f"{len(reader.buf) - reader.pos} trailing bytes in checkpoint")

    for name, arr in params.named_arrays():
        arr[...] = loaded[name]
    for cb in (patch_cb, global_cb):
        cb.entries[...] = loaded[f"{cb.kind}_entries"]
        cb.ema_count[...] = loaded[f"{cb.kind}_ema_count"]
        cb.ema_sum[...] = loaded[f"{cb.kind}_ema_sum"]
    return params, patch_cb, global_cb
