"""Binary checkpoint format.

Layout (all little-endian)::

    b"ACFM"  u32 version
    u32 x 15 config fields (see U32_FIELDS; booleans as 0/1, d_ff 0 = auto)
    u64 seed
    f64 x 3 (revin_eps, bn_eps, bn_momentum)
    u32 tensor count
    per tensor: u32 name length, UTF-8 name, u32 rank, u32 x rank dims, f64 data (row-major)

Parameters come first in model order, then batch-norm running statistics.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ACFormer, ACFormerConfig

MAGIC = b"ACFM"
VERSION = 1
U32_FIELDS = (
    "seq_len", "pred_len", "n_channels", "kernel_size", "stride", "n_kernels", "gate_kernel",
    "n_layers", "d_ff", "use_gate", "use_attention", "revin_affine", "per_head_qkv",
    "per_channel_projection", "conv_bias",
)
F64_FIELDS = ("revin_eps", "bn_eps", "bn_momentum")


class CheckpointError(ValueError):
    pass


def encode(model: ACFormer) -> bytes:
    cfg = model.cfg
    parts = [MAGIC, struct.pack("<I", VERSION)]
    values = [int(getattr(cfg, f) or 0) for f in U32_FIELDS]
    parts.append(struct.pack(f"<{len(values)}I", *values))
    parts.append(struct.pack("<Q", cfg.seed))
    parts.append(struct.pack(f"<{len(F64_FIELDS)}d", *(getattr(cfg, f) for f in F64_FIELDS)))
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> ACFormer:
    view = memoryview(blob)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an ACFormer checkpoint (bad magic)")
    pos = 4
    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    u32 = take(f"<{len(U32_FIELDS)}I")
    (seed,) = take("<Q")
    f64 = take(f"<{len(F64_FIELDS)}d")
    kwargs = dict(zip(U32_FIELDS, u32))
    for flag in ("use_gate", "use_attention", "revin_affine", "per_head_qkv", "per_channel_projection", "conv_bias"):
        kwargs[flag] = bool(kwargs[flag])
    kwargs["d_ff"] = kwargs["d_ff"] or None
    kwargs.update(zip(F64_FIELDS, f64))
    cfg = ACFormerConfig(seed=seed, **kwargs)
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        if pos + 8 * size > len(view):
            raise CheckpointError("truncated checkpoint")
        state[name] = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").reshape(dims).astype(np.float64)
        pos += 8 * size
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    model = ACFormer(cfg)
    model.load_state_dict(state)
    return model


def save(model: ACFormer, path: str | Path) -> None:
    Path(path).write_bytes(encode(model))


def load(path: str | Path) -> ACFormer:
    return decode(Path(path).read_bytes())
