"""Model bundle (backbone + adapter + encoder + decoder) and checkpoint IO.

Checkpoint layout (all integers little-endian):

    magic "OPFW" | u32 version=1
    u32 n_meta   | n_meta x (u32 key_len, key utf-8, i64 value)
    u32 n_tensors| per tensor: u32 name_len, name utf-8, u32 rank,
                   rank x u32 dims, then prod(dims) f32 values (C order)

Meta carries the architecture dims so a checkpoint is self-describing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .attention import Decoder, Encoder
from .errors import CheckpointFormatError, ShapeMismatchError
from .features import ToyBackbone, WeightAdapter

_OPFW_MAGIC = b"OPFW"
OPFW_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 96
    heads: int = 4
    stack_layers: int = 4  # L of the descriptor stacks the adapter ingests
    stack_channels: int = 32  # c of those stacks
    with_backbone: bool = True  # include the small trainable backbone
    toy_channels: int = 32

    def __post_init__(self):
        if self.with_backbone and self.toy_channels != self.stack_channels:
            raise ShapeMismatchError(
                "backbone channel width must equal the stack channel width"
            )


class PoseModel(nn.Module):
    """Everything trainable, in one module so checkpoints are one file."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = ToyBackbone(config.toy_channels) if config.with_backbone else None
        self.adapter = WeightAdapter(config.stack_layers, config.stack_channels, config.dim)
        self.encoder = Encoder(config.dim, config.heads)
        self.decoder = Decoder(config.dim, config.heads)

    @staticmethod
    def seeded(config: ModelConfig, seed: int) -> "PoseModel":
        gen_state = torch.get_rng_state()
        try:
            torch.manual_seed(seed)
            return PoseModel(config)
        finally:
            torch.set_rng_state(gen_state)


def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def save_checkpoint(
    path: str | Path,
    model: PoseModel,
    extra_tensors: dict[str, np.ndarray] | None = None,
    meta: dict[str, int] | None = None,
) -> None:
    cfg = model.config
    all_meta = {
        "dim": cfg.dim,
        "heads": cfg.heads,
        "stack_layers": cfg.stack_layers,
        "stack_channels": cfg.stack_channels,
        "with_backbone": int(cfg.with_backbone),
        "toy_channels": cfg.toy_channels,
    }
    all_meta.update(meta or {})
    tensors: dict[str, np.ndarray] = {
        name: t.detach().cpu().numpy() for name, t in model.state_dict().items()
    }
    for name, arr in (extra_tensors or {}).items():
        tensors["extra." + name] = np.asarray(arr)

    with open(path, "wb") as f:
        f.write(_OPFW_MAGIC)
        f.write(struct.pack("<I", OPFW_VERSION))
        f.write(struct.pack("<I", len(all_meta)))
        for key, value in all_meta.items():
            _write_str(f, key)
            f.write(struct.pack("<q", int(value)))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            _write_str(f, name)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_checkpoint(path: str | Path) -> tuple[dict[str, int], dict[str, np.ndarray]]:
    """Read raw (meta, named tensors) from an OPFW file."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != _OPFW_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not an OPFW checkpoint")
    version = r.u32()
    if version != OPFW_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    meta = {}
    for _ in range(r.u32()):
        key = r.string()
        meta[key] = r.i64()
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()
    if r.off != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - r.off} trailing bytes")
    return meta, tensors


def load_checkpoint(path: str | Path) -> tuple[PoseModel, dict[str, int], dict[str, np.ndarray]]:
    """Rebuild a PoseModel from an OPFW file; returns (model, meta, extras)."""
    meta, tensors = read_checkpoint(path)
    try:
        config = ModelConfig(
            dim=meta["dim"],
            heads=meta["heads"],
            stack_layers=meta["stack_layers"],
            stack_channels=meta["stack_channels"],
            with_backbone=bool(meta["with_backbone"]),
            toy_channels=meta["toy_channels"],
        )
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: missing meta key {e}") from e
    model = PoseModel(config)
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("extra.")}
    extras = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointFormatError(f"{path}: state mismatch: {e}") from e
    return model, meta, extras
