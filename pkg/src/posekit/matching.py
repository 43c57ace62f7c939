"""From descriptors to 2D-3D correspondences.

The flow is: vote for the best-looking template, widen to its viewpoint
neighborhood, run a dual-softmax mutual-nearest match per (decoder layer,
template) pair, lift the template side to 3D through its depth map, and merge
everything into one confidence-sorted correspondence list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from .errors import DegenerateGeometryError, InsufficientDataError, ShapeMismatchError
from .geometry import ViewpointGraph, back_project
from .rendering import PATCH, TemplateSet

CROP_PADDING = 1.2


@dataclass(frozen=True)
class CropTransform:
    """Affine map between crop pixels and original-image pixels.

    Coordinates are continuous with pixel (i, j) occupying [j, j+1) x [i, i+1),
    which keeps the map consistent with how cv2.resize samples the source.
    """

    scale: float
    offset: np.ndarray  # (2,) original-image pixels of the crop's corner
    resolution: int

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateGeometryError("crop scale must be positive")
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))

    def to_original(self, uv: np.ndarray) -> np.ndarray:
        return self.offset + self.scale * np.asarray(uv, dtype=np.float64)

    def to_crop(self, uv: np.ndarray) -> np.ndarray:
        return (np.asarray(uv, dtype=np.float64) - self.offset) / self.scale


@dataclass(frozen=True)
class MatchConfig:
    temperature: float = 0.1
    threshold: float = 0.2
    dedup_radius: float = 0.02  # normalized-frame distance treated as "same point"
    min_correspondences: int = 4


@dataclass(frozen=True)
class Correspondence:
    pixel: np.ndarray  # (2,) original-image pixels
    point3d: np.ndarray  # (3,) normalized object frame
    point3d_metric: np.ndarray  # (3,) original object frame, meters
    confidence: float
    template_index: int
    decoder_layer: int


def make_crop(
    image: np.ndarray,
    bbox: tuple[float, float, float, float],
    out_resolution: int,
    padding: float = CROP_PADDING,
    nearest: bool = False,
) -> tuple[np.ndarray, CropTransform]:
    """Cut a padded square around ``bbox`` and resample it to a patch-aligned size.

    ``bbox`` is (x0, y0, x1, y1). The square is ``padding`` times the longer
    box side, centered on the box, shifted (and if necessary shrunk) to stay
    inside the image. ``nearest`` switches to nearest-neighbor resampling for
    label-like channels (masks, NOCS).
    """
    if out_resolution % PATCH != 0:
        raise ValueError(f"out_resolution must be a multiple of {PATCH}")
    x0, y0, x1, y1 = (float(v) for v in bbox)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise DegenerateGeometryError(f"bbox {bbox} has no area")
    H, W = image.shape[:2]
    side = max(int(np.ceil(padding * max(w, h))), 1)
    side = min(side, W, H)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    left = int(np.clip(round(cx - side / 2.0), 0, W - side))
    top = int(np.clip(round(cy - side / 2.0), 0, H - side))
    region = image[top : top + side, left : left + side]
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.resize(
        np.ascontiguousarray(region), (out_resolution, out_resolution), interpolation=interp
    )
    if image.dtype == bool:
        out = out.astype(bool)
    transform = CropTransform(
        scale=side / out_resolution,
        offset=np.array([left, top], dtype=np.float64),
        resolution=out_resolution,
    )
    return out, transform


def bbox_from_mask(mask: np.ndarray, pad: float = 0.0) -> tuple[float, float, float, float]:
    """Tight (x0, y0, x1, y1) box around True pixels, optionally padded."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise DegenerateGeometryError("mask has no foreground")
    return (
        float(cols.min() - pad),
        float(rows.min() - pad),
        float(cols.max() + 1 + pad),
        float(rows.max() + 1 + pad),
    )


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    an = a / a.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    bn = b / b.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return an @ bn.T


def vote_primary_template(
    image_tokens: torch.Tensor,
    template_tokens: torch.Tensor,
    template_origin: np.ndarray,
) -> int:
    """Template index whose tokens win the most per-image-token argmax contests.

    Similarity is cosine, so the vote is invariant to rescaling either side.
    Ties go to the lowest template index.
    """
    if len(template_tokens) == 0 or len(image_tokens) == 0:
        raise InsufficientDataError("voting needs foreground tokens on both sides")
    if len(template_tokens) != len(template_origin):
        raise ShapeMismatchError("template token/provenance length mismatch")
    # order tokens by provenance so similarity ties resolve to the lowest
    # template index no matter how the sequence arrived
    order = np.lexsort(
        (template_origin[:, 2], template_origin[:, 1], template_origin[:, 0])
    )
    with torch.no_grad():
        sims = _cosine(image_tokens, template_tokens[torch.as_tensor(order)])
        best = sims.argmax(dim=1).numpy()
    winners = template_origin[order][best, 0].astype(np.int64)
    counts = np.bincount(winners)
    return int(counts.argmax())  # argmax breaks ties toward the lowest index


def select_views(primary: int, graph: ViewpointGraph) -> tuple[int, ...]:
    """The primary view plus its angular neighbors, primary first."""
    neighbors = [int(n) for n in graph.neighbors[primary] if int(n) != primary]
    return (int(primary), *neighbors)


def dual_softmax_match(
    image_tokens: torch.Tensor,
    template_tokens: torch.Tensor,
    temperature: float = 0.1,
    threshold: float = 0.2,
) -> list[tuple[int, int, float]]:
    """Mutual-argmax pairs of the dual-softmax confidence matrix.

    C = softmax_rows(S/t) * softmax_cols(S/t) with S the cosine similarity;
    a pair (i, j) survives when it is the argmax of both its row and its
    column of C and C_ij >= threshold.
    """
    if len(image_tokens) == 0 or len(template_tokens) == 0:
        return []
    with torch.no_grad():
        S = _cosine(image_tokens, template_tokens) / temperature
        C = torch.softmax(S, dim=1) * torch.softmax(S, dim=0)
        row_best = C.argmax(dim=1)
        col_best = C.argmax(dim=0)
    out = []
    for i in range(C.shape[0]):
        j = int(row_best[i])
        conf = float(C[i, j])
        if int(col_best[j]) == i and conf >= threshold:
            out.append((i, j, conf))
    return out


def lift_patch_to_3d(
    template_set: TemplateSet, template_index: int, patch_row: int, patch_col: int
) -> np.ndarray | None:
    """Back-project a template patch center into the normalized object frame.

    Uses the pixel at the patch center; if that pixel is background, falls
    back to the foreground pixel nearest the center within the 14x14
    footprint. Returns None when the whole patch is background.
    """
    t = template_set.templates[template_index]
    r0, c0 = patch_row * PATCH, patch_col * PATCH
    depth = t.depth[r0 : r0 + PATCH, c0 : c0 + PATCH]
    row, col = PATCH // 2, PATCH // 2
    if depth[row, col] <= 0:
        fg = np.nonzero(depth > 0)
        if len(fg[0]) == 0:
            return None
        center = (PATCH - 1) / 2.0
        d2 = (fg[0] - center) ** 2 + (fg[1] - center) ** 2
        pick = int(np.argmin(d2))
        row, col = int(fg[0][pick]), int(fg[1][pick])
    pixel = np.array([c0 + col + 0.5, r0 + row + 0.5])
    cam_point = back_project(pixel, float(depth[row, col]), t.intrinsics)
    return t.view_pose.inverse().transform(cam_point)


def gather_correspondences(
    retained: dict[int, tuple[torch.Tensor, torch.Tensor]],
    template_origin: np.ndarray,
    image_grid_shape: tuple[int, int],
    selected: Sequence[int],
    crop_transform: CropTransform,
    template_set: TemplateSet,
    config: MatchConfig = MatchConfig(),
) -> tuple[Correspondence, ...]:
    """Match every (retained layer, selected template) pair and merge.

    Duplicates — the same image patch matched to 3D points closer than the
    dedup radius — keep only their highest-confidence instance. Output is
    sorted by descending confidence and must contain at least
    ``config.min_correspondences`` entries.
    """
    Hp, Wp = image_grid_shape
    to_metric = template_set.normalization.inverse()
    candidates: list[Correspondence] = []
    for layer in sorted(retained):
        img_tokens, tmpl_tokens = retained[layer]
        if len(img_tokens) != Hp * Wp:
            raise ShapeMismatchError("image token count != patch grid size")
        for t_idx in selected:
            sel = np.nonzero(template_origin[:, 0] == t_idx)[0]
            if len(sel) == 0:
                continue
            pairs = dual_softmax_match(
                img_tokens,
                tmpl_tokens[torch.as_tensor(sel)],
                config.temperature,
                config.threshold,
            )
            for i, j, conf in pairs:
                _, prow, pcol = (int(v) for v in template_origin[sel[j]])
                point = lift_patch_to_3d(template_set, t_idx, prow, pcol)
                if point is None:
                    continue
                irow, icol = divmod(i, Wp)
                crop_center = np.array(
                    [icol * PATCH + PATCH / 2.0, irow * PATCH + PATCH / 2.0]
                )
                candidates.append(
                    Correspondence(
                        pixel=crop_transform.to_original(crop_center),
                        point3d=point,
                        point3d_metric=to_metric.apply(point),
                        confidence=conf,
                        template_index=int(t_idx),
                        decoder_layer=int(layer),
                    )
                )

    # dedup within each image patch, deterministically
    candidates.sort(
        key=lambda c: (-c.confidence, c.decoder_layer, c.template_index, *c.pixel)
    )
    kept: list[Correspondence] = []
    by_pixel: dict[tuple[float, float], list[np.ndarray]] = {}
    for cand in candidates:
        key = (float(cand.pixel[0]), float(cand.pixel[1]))
        points = by_pixel.setdefault(key, [])
        if any(np.linalg.norm(cand.point3d - p) <= config.dedup_radius for p in points):
            continue
        points.append(cand.point3d)
        kept.append(cand)
    if len(kept) < config.min_correspondences:
        raise InsufficientDataError(
            f"only {len(kept)} correspondences survive matching "
            f"(need {config.min_correspondences})"
        )
    return tuple(kept)


# ---------------------------------------------------------------------------
# debug dump (JSON lines, one correspondence each)


def dump_correspondences_jsonl(
    correspondences: Sequence[Correspondence], path: str | Path
) -> None:
    with open(path, "w") as f:
        for c in correspondences:
            f.write(
                json.dumps(
                    {
                        "pixel": list(c.pixel),
                        "point3d": list(c.point3d),
                        "point3d_metric": list(c.point3d_metric),
                        "confidence": c.confidence,
                        "template_index": c.template_index,
                        "layer": c.decoder_layer,
                    }
                )
                + "\n"
            )


def load_correspondences_jsonl(path: str | Path) -> tuple[Correspondence, ...]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            Correspondence(
                pixel=np.array(rec["pixel"], dtype=np.float64),
                point3d=np.array(rec["point3d"], dtype=np.float64),
                point3d_metric=np.array(rec["point3d_metric"], dtype=np.float64),
                confidence=float(rec["confidence"]),
                template_index=int(rec["template_index"]),
                decoder_layer=int(rec["layer"]),
            )
        )
    return tuple(out)
