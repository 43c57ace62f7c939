"""Transformer core: rotary embeddings over 3D NOCS coordinates and 2D patch
grids, multi-head attention, SwiGLU feed-forward, the template encoder, and
the two-way image/template decoder.

Rotary embeddings act on consecutive dim pairs (2j, 2j+1). The 3D variant
splits d into d/6 six-dim subspaces, each rotated by three planar angles
theta_{t,k} = pi * t * 10000^(-2(k-1)/d) for the coordinates t = x, y, z.
The 2D variant is axial: the first half of dims follows the row coordinate,
the second half the column, frequencies 10000^(-2(k-1)/(d/2)) without the pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import PosekitError, ShapeMismatchError
from .features import PatchDescriptorGrid


@dataclass(frozen=True)
class TokenSequence:
    """Flat token set with positional coordinates and per-token provenance.

    ``origin`` rows are (source index, patch row, patch col); the source index
    is the template index for encoder outputs.
    """

    tokens: torch.Tensor  # (M, d)
    coords3d: torch.Tensor | None = None  # (M, 3) NOCS in [0, 1]
    coords2d: torch.Tensor | None = None  # (M, 2) patch (row, col)
    origin: np.ndarray | None = None  # (M, 3) int64

    def __len__(self) -> int:
        return self.tokens.shape[0]


def _rotate_pairs(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate dim pairs (2j, 2j+1) of x by angles (..., d/2)."""
    cos, sin = torch.cos(angles), torch.sin(angles)
    pairs = x.reshape(*x.shape[:-1], -1, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.reshape(x.shape)


def rope3d_apply(vectors: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Rotate (M, d) vectors by their (M, 3) NOCS coordinates; norm-preserving."""
    d = vectors.shape[-1]
    if d % 6 != 0:
        raise ShapeMismatchError(f"3D rotary dim {d} must be a multiple of 6")
    dtype = vectors.dtype
    k = torch.arange(d // 6, dtype=dtype)
    freqs = math.pi * torch.pow(torch.tensor(10000.0, dtype=dtype), -2.0 * k / d)
    plane_freq = freqs.repeat_interleave(3)  # plane j belongs to subspace j//3
    axis = torch.arange(d // 2) % 3  # plane j rotates by coordinate j%3
    angles = coords.to(dtype)[..., axis] * plane_freq
    return _rotate_pairs(vectors, angles)


def rope2d_apply(vectors: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Rotate (M, d) vectors by their (M, 2) patch (row, col); norm-preserving."""
    d = vectors.shape[-1]
    if d % 4 != 0:
        raise ShapeMismatchError(f"2D rotary dim {d} must be a multiple of 4")
    dtype = vectors.dtype
    k = torch.arange(d // 4, dtype=dtype)
    freqs = torch.pow(torch.tensor(10000.0, dtype=dtype), -2.0 * k / (d / 2.0))
    plane_freq = torch.cat([freqs, freqs])
    c = coords.to(dtype)
    axis = (torch.arange(d // 2) >= d // 4).long()  # 0 = row half, 1 = col half
    angles = c[..., axis] * plane_freq
    return _rotate_pairs(vectors, angles)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    num_heads: int = 1,
    rope: str | None = None,
    coords_q: torch.Tensor | None = None,
    coords_k: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled-exponential attention; rotary applied to queries and keys only.

    ``rope`` is None, "3d" (full-width rotation by NOCS coords) or "2d"
    (axial rotation per head by patch coords). Scores use exp(q.k / sqrt(dh))
    with dh the per-head width, so a single-head call matches the plain
    formula exp(q.k / sqrt(d)).
    """
    M, d = q.shape
    N = k.shape[0]
    if k.shape[1] != d or v.shape != k.shape:
        raise ShapeMismatchError("attention operand dims disagree")
    if d % num_heads != 0:
        raise ShapeMismatchError(f"dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    if rope == "3d":
        q = rope3d_apply(q, coords_q)
        k = rope3d_apply(k, coords_k)
    elif rope == "2d":
        # per-head axial rotation: each head's dh dims split row/col
        qh = q.reshape(M, num_heads, dh)
        kh = k.reshape(N, num_heads, dh)
        q = rope2d_apply(qh, coords_q[:, None, :].expand(M, num_heads, 2)).reshape(M, d)
        k = rope2d_apply(kh, coords_k[:, None, :].expand(N, num_heads, 2)).reshape(N, d)
    elif rope is not None:
        raise ValueError(f"unknown rope mode {rope!r}")

    qh = q.reshape(M, num_heads, dh).transpose(0, 1)  # (h, M, dh)
    kh = k.reshape(N, num_heads, dh).transpose(0, 1)
    vh = v.reshape(N, num_heads, dh).transpose(0, 1)
    scores = qh @ kh.transpose(1, 2) / math.sqrt(dh)
    if torch.isinf(scores).all(dim=-1).any():
        raise PosekitError("attention row with no finite score")
    weights = torch.softmax(scores, dim=-1)
    if torch.isnan(weights).any():
        raise PosekitError("attention produced NaN weights")
    out = weights @ vh  # (h, M, dh)
    return out.transpose(0, 1).reshape(M, d)


def swiglu_hidden(dim: int) -> int:
    """Hidden width 4d/1.5, rounded to a multiple of 8."""
    return int(round(4.0 * dim / 1.5 / 8.0)) * 8


class SwiGLU(nn.Module):
    """(silu(x W1) * (x W2)) W3."""

    def __init__(self, dim: int):
        super().__init__()
        hidden = swiglu_hidden(dim)
        self.w1 = nn.Linear(dim, hidden)
        self.w2 = nn.Linear(dim, hidden)
        self.w3 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w3(F.silu(self.w1(x)) * self.w2(x))


def swiglu_ffn(x: torch.Tensor, params: SwiGLU) -> torch.Tensor:
    return params(x)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeMismatchError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, x_q, x_kv, rope=None, coords_q=None, coords_k=None):
        out = attention(
            self.wq(x_q), self.wk(x_kv), self.wv(x_kv),
            num_heads=self.num_heads, rope=rope,
            coords_q=coords_q, coords_k=coords_k,
        )
        return self.wo(out)


class EncoderBlock(nn.Module):
    """Self-attention with 3D rotary coords, then SwiGLU; post-norm residuals."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.ffn = SwiGLU(dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, coords3d: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x, x, rope="3d", coords_q=coords3d, coords_k=coords3d))
        x = self.norm2(x + self.ffn(x))
        return x


class Encoder(nn.Module):
    def __init__(self, dim: int, num_heads: int, num_blocks: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(dim, num_heads) for _ in range(num_blocks)
        )

    def forward(self, tokens: torch.Tensor, coords3d: torch.Tensor) -> torch.Tensor:
        x = tokens
        for block in self.blocks:
            x = block(x, coords3d)
        return x


def encoder_forward(
    template_grids: list[PatchDescriptorGrid],
    nocs_grids: list[tuple[np.ndarray, np.ndarray]],
    params: Encoder,
) -> TokenSequence:
    """Flatten all templates' foreground patches into one sequence and encode.

    ``nocs_grids[i]`` is (patch_nocs (Hp, Wp, 3), patch_mask (Hp, Wp)) for
    template i; background patches are excluded from the sequence entirely.
    """
    if len(template_grids) != len(nocs_grids):
        raise ShapeMismatchError("grid/NOCS list length mismatch")
    toks, coords, origin = [], [], []
    for i, (grid, (patch_nocs, patch_mask)) in enumerate(zip(template_grids, nocs_grids)):
        if patch_mask.shape != grid.data.shape[:2]:
            raise ShapeMismatchError(f"template {i}: NOCS grid does not match descriptor grid")
        rows, cols = np.nonzero(patch_mask)
        if len(rows) == 0:
            continue
        toks.append(grid.data[rows, cols])
        coords.append(torch.as_tensor(patch_nocs[rows, cols], dtype=grid.data.dtype))
        origin.append(np.stack([np.full(len(rows), i), rows, cols], axis=1))
    if not toks:
        raise ShapeMismatchError("no foreground tokens in any template")
    tokens = torch.cat(toks)
    coords3d = torch.cat(coords)
    out = params(tokens, coords3d)
    return TokenSequence(
        tokens=out, coords3d=coords3d,
        origin=np.concatenate(origin).astype(np.int64),
    )


class DecoderLayer(nn.Module):
    """Image self-attention (2D rotary), image->template cross-attention, then
    template->image cross-attention; no positional terms in the cross steps."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.cross_img = MultiHeadAttention(dim, num_heads)
        self.cross_tmpl = MultiHeadAttention(dim, num_heads)
        self.norm_self = nn.LayerNorm(dim)
        self.norm_img = nn.LayerNorm(dim)
        self.norm_tmpl = nn.LayerNorm(dim)

    def forward(self, img, tmpl, coords2d):
        img = self.norm_self(
            img + self.self_attn(img, img, rope="2d", coords_q=coords2d, coords_k=coords2d)
        )
        img = self.norm_img(img + self.cross_img(img, tmpl))
        tmpl = self.norm_tmpl(tmpl + self.cross_tmpl(tmpl, img))
        return img, tmpl


RETAINED_LAYERS = (2, 3, 4)  # 1-based decoder layers used for matching


@dataclass(frozen=True)
class DecoderOutputs:
    """Per-layer (image tokens, template tokens); layers 2-4 are L2-normalized."""

    layers: tuple[tuple[torch.Tensor, torch.Tensor], ...]
    image_grid_shape: tuple[int, int]  # (Hp, Wp)

    def retained(self) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
        return {l: self.layers[l - 1] for l in RETAINED_LAYERS}


class Decoder(nn.Module):
    def __init__(self, dim: int, num_heads: int, num_layers: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(dim, num_heads) for _ in range(num_layers)
        )


def decoder_forward(
    image_grid: PatchDescriptorGrid,
    encoded_templates: TokenSequence,
    params: Decoder,
) -> DecoderOutputs:
    """Run the two-way decoder; retain unit-norm outputs for layers 2-4."""
    Hp, Wp, d = image_grid.data.shape
    img = image_grid.data.reshape(Hp * Wp, d)
    rows, cols = np.unravel_index(np.arange(Hp * Wp), (Hp, Wp))
    coords2d = torch.as_tensor(
        np.stack([rows, cols], axis=1), dtype=img.dtype
    )
    tmpl = encoded_templates.tokens
    if tmpl.shape[1] != d:
        raise ShapeMismatchError("image/template dims disagree")
    outs = []
    for idx, layer in enumerate(params.layers):
        img, tmpl = layer(img, tmpl, coords2d)
        if idx + 1 in RETAINED_LAYERS:
            outs.append((F.normalize(img, dim=-1), F.normalize(tmpl, dim=-1)))
        else:
            outs.append((img, tmpl))
    return DecoderOutputs(layers=tuple(outs), image_grid_shape=(Hp, Wp))
