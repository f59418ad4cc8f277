"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic           4 bytes  b"FDDF"
    format_version  u32
    config          u32 stem_channels, u32 n_stages, u32 * n_stages stage widths,
                    u32 blocks_per_stage, u32 input_channels, u32 se_reduction,
                    u32 branch mask (bit i set = BRANCHES[i] active)
    tensor_count    u32
    tensors         sorted by name; each:
                      u32 name_len, name (ASCII), u32 rank, u64 * rank dims,
                      float32 * prod(dims)
    crc32           u32 over every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from fddf.disentangle import BRANCHES
from fddf.errors import ConsistencyError, CorruptionError, FormatError
from fddf.model import BackboneConfig, FddfModel, ModelConfig

MAGIC = b"FDDF"
FORMAT_VERSION = 1


def _encode_config(cfg: ModelConfig) -> bytes:
    bb = cfg.backbone
    mask = sum(1 << i for i, b in enumerate(BRANCHES) if b in cfg.branches)
    words = [bb.stem_channels, len(bb.stage_channels), *bb.stage_channels]
    words += [bb.blocks_per_stage, bb.input_channels, cfg.se_reduction, mask]
    return struct.pack(f"<{len(words)}I", *words)


def encode_checkpoint(model: FddfModel) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _encode_config(model.config)]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("ascii")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: FddfModel, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def decode_checkpoint(buf: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("not an FDDF checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    stem, n_stages = r.u32s(2)
    stages = r.u32s(n_stages)
    blocks, in_ch, se, mask = r.u32s(4)
    branches = tuple(b for i, b in enumerate(BRANCHES) if mask >> i & 1)
    try:
        config = ModelConfig(BackboneConfig(stem, tuple(stages), blocks, in_ch), branches, se)
    except ValueError as exc:
        raise ConsistencyError(f"checkpoint carries an invalid model config: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("ascii")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes after tensor table")
    return config, tensors


def load_checkpoint(path: str | os.PathLike, expected: ModelConfig | None = None) -> FddfModel:
    """Rebuild a model from ``path``.

    With ``expected`` the stored configuration must match it exactly,
    which is how loading a 3-branch checkpoint into a 4-branch setup fails.
    """
    config, tensors = decode_checkpoint(Path(path).read_bytes())
    if expected is not None and expected != config:
        raise ConsistencyError(f"checkpoint config {config} does not match expected {expected}")
    model = FddfModel(config)
    load_state(model, tensors)
    return model.eval()


def load_state(model: FddfModel, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise ConsistencyError(f"tensor names disagree with model: missing {missing}, unexpected {extra}")
    for name, arr in tensors.items():
        target = params[name].data if name in params else buffers[name]
        if target.shape != arr.shape:
            raise ConsistencyError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
    for name, arr in tensors.items():
        if name in params:
            params[name].data = arr.astype(params[name].dtype, copy=True)
        else:
            model.set_buffer(name, arr)
