"""Patch descriptor sources: stack file IO, the trainable weight adapter,
a small trainable backbone, and a geometry-derived oracle backbone.

Descriptor stacks hold per-patch features from L backbone layers; the weight
adapter fuses them into a single d-dim grid. Patches are 14x14 px.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointFormatError, ShapeMismatchError

PATCH = 14
ORACLE_SEED = 613566756  # fixed seed of the oracle backbone's random lift


@dataclass(frozen=True)
class MultiLayerDescriptorStack:
    """(L, Hp, Wp, c) per-patch descriptors from L backbone layers."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"stack must be 4-d, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ShapeMismatchError("stack contains non-finite values")

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class PatchDescriptorGrid:
    """(Hp, Wp, d) fused descriptors; image_size is the source image in px."""

    data: torch.Tensor
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"grid must be 3-d, got {tuple(self.data.shape)}")
        if self.data.shape[2] % 6 != 0:
            raise ShapeMismatchError(f"descriptor dim {self.data.shape[2]} not a multiple of 6")
        h, w = self.image_size
        if (h // PATCH, w // PATCH) != (self.data.shape[0], self.data.shape[1]):
            raise ShapeMismatchError("grid does not match image_size / 14")

    @property
    def dim(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# PDSK stack files

_PDSK_MAGIC = b"PDSK"
PDSK_VERSION = 1


def save_descriptor_stack(path: str | Path, stack: MultiLayerDescriptorStack) -> None:
    data = stack.data.detach().cpu().numpy().astype("<f4")
    L, Hp, Wp, c = data.shape
    with open(path, "wb") as f:
        f.write(_PDSK_MAGIC)
        f.write(struct.pack("<5I", PDSK_VERSION, L, Hp, Wp, c))
        f.write(data.tobytes())  # [layer][row][col][channel]


def load_descriptor_stack(path: str | Path) -> MultiLayerDescriptorStack:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != _PDSK_MAGIC:
        raise CheckpointFormatError(f"{path}: not a PDSK descriptor stack")
    version, L, Hp, Wp, c = struct.unpack_from("<5I", raw, 4)
    if version != PDSK_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported PDSK version {version}")
    expected = 24 + 4 * L * Hp * Wp * c
    if len(raw) != expected:
        raise CheckpointFormatError(
            f"{path}: size {len(raw)} != expected {expected} for dims "
            f"L={L} grid={Hp}x{Wp} c={c}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=24).reshape(L, Hp, Wp, c)
    return MultiLayerDescriptorStack(torch.from_numpy(data.copy()))


# ---------------------------------------------------------------------------
# Weight adapter

class WeightAdapter(nn.Module):
    """Fuse an L-layer stack into one d-dim grid.

    Per patch: concat the L layer vectors -> linear reduce to d -> 4 parallel
    3x3 convolutions with dilations 1..4 (zero padding) -> elementwise sum ->
    layer norm per patch.
    """

    DILATIONS = (1, 2, 3, 4)

    def __init__(self, layers: int, channels: int, dim: int):
        super().__init__()
        if dim % 6 != 0:
            raise ShapeMismatchError(f"adapter dim {dim} must be a multiple of 6")
        self.layers = layers
        self.channels = channels
        self.dim = dim
        self.reduce = nn.Linear(layers * channels, dim)
        self.convs = nn.ModuleList(
            nn.Conv2d(dim, dim, kernel_size=3, dilation=k, padding=k)
            for k in self.DILATIONS
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, stack: MultiLayerDescriptorStack) -> PatchDescriptorGrid:
        x = stack.data
        if stack.layers != self.layers or stack.channels != self.channels:
            raise ShapeMismatchError(
                f"stack dims L={stack.layers} c={stack.channels} do not match "
                f"adapter L={self.layers} c={self.channels}"
            )
        Hp, Wp = stack.grid
        # (L, Hp, Wp, c) -> (Hp, Wp, L*c): layer-major concat per patch
        flat = x.permute(1, 2, 0, 3).reshape(Hp, Wp, self.layers * self.channels)
        reduced = self.reduce(flat)  # (Hp, Wp, d)
        grid = reduced.permute(2, 0, 1).unsqueeze(0)  # (1, d, Hp, Wp)
        summed = self.convs[0](grid)
        for conv in self.convs[1:]:
            summed = summed + conv(grid)
        out = summed.squeeze(0).permute(1, 2, 0)  # (Hp, Wp, d)
        out = self.norm(out)
        return PatchDescriptorGrid(out, (Hp * PATCH, Wp * PATCH))


def weight_adapter_forward(
    stack: MultiLayerDescriptorStack, params: WeightAdapter
) -> PatchDescriptorGrid:
    return params(stack)


# ---------------------------------------------------------------------------
# Toy backbone

class ToyBackbone(nn.Module):
    """Small trainable stand-in for a frozen foundation backbone.

    14x14 patchify -> linear embed -> 4 stacked 3x3 conv + GELU stages; the
    output stack holds one layer per stage (L=4). Replicate padding keeps a
    constant image mapping to a spatially constant stack.
    """

    LAYERS = 4

    def __init__(self, channels: int = 32):
        super().__init__()
        self.channels = channels
        self.embed = nn.Linear(3 * PATCH * PATCH, channels)
        self.stages = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate")
            for _ in range(self.LAYERS)
        )

    def forward(self, image: torch.Tensor) -> MultiLayerDescriptorStack:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeMismatchError(f"image must be (H, W, 3), got {tuple(image.shape)}")
        H, W = image.shape[:2]
        if H % PATCH or W % PATCH:
            raise ShapeMismatchError(f"image sides must be multiples of {PATCH}")
        Hp, Wp = H // PATCH, W // PATCH
        patches = (
            image.reshape(Hp, PATCH, Wp, PATCH, 3)
            .permute(0, 2, 1, 3, 4)
            .reshape(Hp, Wp, PATCH * PATCH * 3)
        )
        x = self.embed(patches).permute(2, 0, 1).unsqueeze(0)  # (1, c, Hp, Wp)
        outs = []
        for stage in self.stages:
            x = F.gelu(stage(x))
            outs.append(x.squeeze(0).permute(1, 2, 0))  # (Hp, Wp, c)
        return MultiLayerDescriptorStack(torch.stack(outs))


def toy_backbone_forward(
    image: torch.Tensor, params: ToyBackbone
) -> MultiLayerDescriptorStack:
    return params(image)


# ---------------------------------------------------------------------------
# Oracle backbone and patch-level NOCS pooling

def downsample_nocs(
    nocs: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pool NOCS to the patch grid: mean over foreground pixels per 14x14 patch.

    Returns (patch_nocs (Hp, Wp, 3), patch_mask (Hp, Wp)); background patches
    (no foreground pixel) get NOCS zeros and mask False.
    """
    H, W = mask.shape
    if H % PATCH or W % PATCH:
        raise ShapeMismatchError(f"image sides must be multiples of {PATCH}")
    Hp, Wp = H // PATCH, W // PATCH
    m = mask.reshape(Hp, PATCH, Wp, PATCH).transpose(0, 2, 1, 3).reshape(Hp, Wp, -1)
    n = (
        nocs.reshape(Hp, PATCH, Wp, PATCH, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(Hp, Wp, PATCH * PATCH, 3)
    )
    counts = m.sum(axis=2)
    patch_mask = counts > 0
    sums = (n * m[..., None]).sum(axis=2)
    patch_nocs = np.zeros((Hp, Wp, 3), dtype=np.float64)
    np.divide(sums, counts[..., None], out=patch_nocs, where=patch_mask[..., None])
    return patch_nocs, patch_mask


_oracle_lift_cache: dict[int, np.ndarray] = {}


def _oracle_lift(dim: int) -> np.ndarray:
    if dim not in _oracle_lift_cache:
        rng = np.random.default_rng(ORACLE_SEED)
        _oracle_lift_cache[dim] = rng.standard_normal((dim, 3))
    return _oracle_lift_cache[dim]


def oracle_backbone(
    nocs: np.ndarray, mask: np.ndarray, dim: int = 96
) -> PatchDescriptorGrid:
    """Geometry-derived descriptors for pipeline validation without learning.

    Per patch: a fixed seeded linear lift of the mean foreground NOCS value to
    ``dim`` dims, L2-normalized; background patches get the zero vector.
    """
    patch_nocs, patch_mask = downsample_nocs(nocs, mask)
    desc = patch_nocs @ _oracle_lift(dim).T  # (Hp, Wp, dim)
    norms = np.linalg.norm(desc, axis=2, keepdims=True)
    valid = patch_mask[..., None] & (norms > 1e-12)
    desc = np.where(valid, desc / np.where(norms > 1e-12, norms, 1.0), 0.0)
    H, W = mask.shape
    return PatchDescriptorGrid(torch.from_numpy(desc.astype(np.float32)), (H, W))
