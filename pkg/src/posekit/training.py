"""Contrastive training of the trainable stack on self-rendered views.

Ground truth comes from geometry: both the training image and the templates
are renders with known poses, so patch centers lift to the normalized object
frame and correspondence is a distance test there. The loss is a two-direction
focal InfoNCE over cosine similarities.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attention import decoder_forward, encoder_forward
from .errors import InsufficientDataError, NumericalError
from .features import PATCH, downsample_nocs
from .geometry import CameraIntrinsics, ObjectModel, Pose, back_project, look_at_pose
from .matching import lift_patch_to_3d
from .models import PoseModel, save_checkpoint
from .rendering import TemplateSet, rasterize, template_intrinsics
from .synth import random_unit_vector

POSITIVE_EPSILON = 0.05  # max distance between lifted points, NOCS units


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01  # similarity temperature
    lambda1: float = 1.0  # template->image term weight
    lambda2: float = 1.0  # image->template term weight
    gamma: float = 1.0  # focal exponent
    anchors_per_step: int = 256
    negatives_per_anchor: int = 256

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.anchors_per_step < 1 or self.negatives_per_anchor < 1:
            raise ValueError("anchor/negative counts must be >= 1")


TEMPLATE_TO_IMAGE = "template_to_image"
IMAGE_TO_TEMPLATE = "image_to_template"


@dataclass(frozen=True)
class AnchorBatch:
    """Index triples into (source tokens, target tokens) for one loss term."""

    direction: str
    anchor_indices: np.ndarray  # (N,) into the source token array
    positive_indices: np.ndarray  # (N,) into the target token array
    negative_indices: np.ndarray  # (N, M) into the target token array

    def __post_init__(self):
        if self.direction not in (TEMPLATE_TO_IMAGE, IMAGE_TO_TEMPLATE):
            raise ValueError(f"unknown direction {self.direction!r}")
        pos = np.asarray(self.positive_indices)
        neg = np.asarray(self.negative_indices)
        if (neg == pos[:, None]).any():
            raise ValueError("a negative coincides with its anchor's positive")


# ---------------------------------------------------------------------------
# geometric ground truth


def lift_image_patches(
    depth: np.ndarray,
    mask: np.ndarray,
    pose: Pose,
    intrinsics: CameraIntrinsics,
) -> tuple[np.ndarray, np.ndarray]:
    """Lift every patch center of a posed render into the object frame.

    Uses the pixel at the patch center, falling back to the foreground pixel
    nearest the center (mirroring the template-side lift). Returns
    (points (Hp*Wp, 3) in the render's object frame, usable (Hp*Wp,) bool);
    rows of all-background patches are zeros with usable False.
    """
    H, W = mask.shape
    Hp, Wp = H // PATCH, W // PATCH
    points = np.zeros((Hp * Wp, 3))
    usable = np.zeros(Hp * Wp, dtype=bool)
    Rt = pose.rotation.T
    for r in range(Hp):
        for c in range(Wp):
            sub = mask[r * PATCH : (r + 1) * PATCH, c * PATCH : (c + 1) * PATCH]
            if sub[7, 7]:
                pr, pc = 7, 7
            elif sub.any():
                rows, cols = np.nonzero(sub)
                k = np.argmin((rows - 6.5) ** 2 + (cols - 6.5) ** 2)
                pr, pc = int(rows[k]), int(cols[k])
            else:
                continue
            v, u = r * PATCH + pr, c * PATCH + pc
            cam = back_project(
                np.array([u + 0.5, v + 0.5]), depth[v, u], intrinsics
            )
            points[r * Wp + c] = Rt @ (cam - pose.translation)
            usable[r * Wp + c] = True
    return points, usable


def lift_template_tokens(
    template_set: TemplateSet,
    origin: np.ndarray,
    index_map: Sequence[int] | None = None,
) -> np.ndarray:
    """Object-frame lift of each encoded template token.

    ``origin`` rows are (source index, patch row, patch col); ``index_map``
    translates source indices when only a subset of templates was encoded.
    """
    out = np.empty((len(origin), 3))
    for k, (src, r, c) in enumerate(origin):
        t = int(src) if index_map is None else int(index_map[int(src)])
        p = lift_patch_to_3d(template_set, t, int(r), int(c))
        if p is None:  # origin rows come from foreground patches
            raise InsufficientDataError(f"token {k} lifted to background")
        out[k] = p
    return out


def ground_truth_positives(
    image_points: np.ndarray,
    usable: np.ndarray,
    template_points: np.ndarray,
    epsilon: float = POSITIVE_EPSILON,
) -> list[np.ndarray]:
    """Per image patch: template tokens within epsilon (NOCS units).

    Both point sets live in the [-1, 1] normalized frame, so the distance is
    halved to express the threshold on the NOCS encoding scale. Unusable
    (background) patches get empty sets.
    """
    empty = np.empty(0, dtype=np.int64)
    out = []
    for i in range(len(image_points)):
        if not usable[i]:
            out.append(empty)
            continue
        d = np.linalg.norm(template_points - image_points[i], axis=1) * 0.5
        out.append(np.nonzero(d < epsilon)[0].astype(np.int64))
    return out


# ---------------------------------------------------------------------------
# batch sampling


def sample_batch(
    direction: str,
    positives: Sequence[np.ndarray],
    image_pool: np.ndarray,
    n_template_tokens: int,
    config: LossConfig,
    rng: np.random.Generator,
) -> AnchorBatch:
    """Draw anchors, one positive each, and per-anchor negative sets.

    template_to_image: anchors are template tokens with at least one
    corresponding image patch; negatives come from the image-patch pool minus
    the chosen positive. image_to_template: anchors are image patches with a
    non-empty positive set; negatives are template tokens outside that set.
    """
    N, M = config.anchors_per_step, config.negatives_per_anchor
    if direction == IMAGE_TO_TEMPLATE:
        candidates = np.array(
            [i for i in image_pool if len(positives[i])], dtype=np.int64
        )
        if len(candidates) < N:
            raise InsufficientDataError(
                f"{len(candidates)} usable anchors < {N} requested"
            )
        anchors = np.sort(rng.choice(candidates, size=N, replace=False))
        pos = np.empty(N, dtype=np.int64)
        neg = np.empty((N, M), dtype=np.int64)
        all_templates = np.arange(n_template_tokens, dtype=np.int64)
        for k, a in enumerate(anchors):
            pset = positives[a]
            pos[k] = rng.choice(pset)
            pool = np.setdiff1d(all_templates, pset, assume_unique=False)
            if len(pool) < M:
                raise InsufficientDataError(
                    f"negative pool {len(pool)} < {M} requested"
                )
            neg[k] = rng.choice(pool, size=M, replace=False)
        return AnchorBatch(direction, anchors, pos, neg)

    # template -> image: invert the correspondence map
    images_of: dict[int, list[int]] = {}
    for i in image_pool:
        for t in positives[i]:
            images_of.setdefault(int(t), []).append(int(i))
    candidates = np.array(sorted(images_of), dtype=np.int64)
    if len(candidates) < N:
        raise InsufficientDataError(
            f"{len(candidates)} usable anchors < {N} requested"
        )
    anchors = np.sort(rng.choice(candidates, size=N, replace=False))
    pos = np.empty(N, dtype=np.int64)
    neg = np.empty((N, M), dtype=np.int64)
    for k, a in enumerate(anchors):
        pos[k] = rng.choice(np.asarray(images_of[int(a)], dtype=np.int64))
        pool = image_pool[image_pool != pos[k]]
        if len(pool) < M:
            raise InsufficientDataError(f"negative pool {len(pool)} < {M} requested")
        neg[k] = rng.choice(pool, size=M, replace=False)
    return AnchorBatch(TEMPLATE_TO_IMAGE, anchors, pos, neg)


# ---------------------------------------------------------------------------
# loss


def focal_contrastive_loss(
    batch: AnchorBatch,
    source_tokens: torch.Tensor,
    target_tokens: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    """One focal InfoNCE term: sum over anchors of (1-s)^gamma * (-ln s).

    s is the softmax mass of the positive among {positive} U negatives under
    temperature-scaled cosine similarity. Underflowing s is clamped at 1e-12
    (with a warning) so the log stays finite.
    """
    a = F.normalize(source_tokens[torch.as_tensor(batch.anchor_indices)], dim=-1)
    p = F.normalize(target_tokens[torch.as_tensor(batch.positive_indices)], dim=-1)
    n = F.normalize(target_tokens[torch.as_tensor(batch.negative_indices)], dim=-1)
    ap = (a * p).sum(-1) / config.tau
    an = torch.einsum("nd,nmd->nm", a, n) / config.tau
    ln_s = ap - torch.logsumexp(torch.cat([ap[:, None], an], dim=1), dim=1)
    s = ln_s.exp()
    if bool((s < 1e-12).any()):
        warnings.warn("contrastive softmax underflow; clamping at 1e-12")
        s = s.clamp_min(1e-12)
    return ((1.0 - s) ** config.gamma * -s.log()).sum()


def total_contrastive_loss(
    l1_batch: AnchorBatch,
    l2_batch: AnchorBatch,
    image_tokens: torch.Tensor,
    template_tokens: torch.Tensor,
    config: LossConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted two-direction total; returns (total, term1, term2)."""
    l1 = focal_contrastive_loss(l1_batch, template_tokens, image_tokens, config)
    l2 = focal_contrastive_loss(l2_batch, image_tokens, template_tokens, config)
    return config.lambda1 * l1 + config.lambda2 * l2, l1, l2


def match_accuracy(
    image_tokens: torch.Tensor,
    template_tokens: torch.Tensor,
    positives: Sequence[np.ndarray],
) -> tuple[float, float]:
    """Top-1 retrieval accuracy of image patches against template tokens.

    Returns (accuracy, chance) where chance is the mean positive-set fraction
    — the hit rate of a uniformly guessing matcher.
    """
    img = F.normalize(image_tokens, dim=-1)
    tmpl = F.normalize(template_tokens, dim=-1)
    sims = img @ tmpl.T
    top1 = sims.argmax(dim=1).numpy()
    hits = total = 0
    chance = 0.0
    for i, pset in enumerate(positives):
        if len(pset) == 0:
            continue
        total += 1
        hits += int(top1[i] in pset)
        chance += len(pset) / tmpl.shape[0]
    if total == 0:
        raise InsufficientDataError("no usable anchors to score")
    return hits / total, chance / total


# ---------------------------------------------------------------------------
# the loop


@dataclass(frozen=True)
class TrainingObject:
    """One onboarded object: templates plus the model used to render them."""

    object_model: ObjectModel
    template_set: TemplateSet


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    peak_lr: float = 1e-4
    warmup_steps: int = 200
    floor_lr: float = 1e-6
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    templates_per_step: int = 8
    checkpoint_every: int = 250
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to the floor at the end."""
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = max(1, config.steps - 1 - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return config.floor_lr + 0.5 * (config.peak_lr - config.floor_lr) * (
        1.0 + math.cos(math.pi * progress)
    )


@dataclass(frozen=True)
class TrainHistory:
    steps: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    total: np.ndarray
    lr: np.ndarray

    def smoothed(self, window: int = 50) -> np.ndarray:
        """Trailing-mean total loss."""
        w = min(window, len(self.total))
        kernel = np.ones(w) / w
        return np.convolve(self.total, kernel, mode="valid")


def _render_training_view(
    obj: TrainingObject, rng: np.random.Generator
):
    """A randomly posed render of the normalized mesh at template scale."""
    tset = obj.template_set
    res = tset.resolution
    intr = template_intrinsics(res)
    radius = np.linalg.norm(
        tset.graph.view_poses[0].rotation.T @ tset.graph.view_poses[0].translation
    )
    direction = random_unit_vector(rng)
    pose = look_at_pose(radius * direction, np.zeros(3))
    mesh = obj.object_model.mesh
    shading = "vertex_color" if mesh.vertex_colors is not None else "lambertian"
    view = rasterize(mesh, pose, intr, shading=shading)
    # brightness jitter stands in for lighting variation
    rgb = np.clip(view.rgb * rng.uniform(0.8, 1.2), 0.0, 1.0)
    return rgb, view.depth, view.mask, pose, intr


def _forward_tokens(model: PoseModel, rgb: np.ndarray, obj: TrainingObject, chosen):
    """Descriptor tokens for one training image and a template subset."""
    tset = obj.template_set
    img_stack = model.backbone(torch.as_tensor(rgb, dtype=torch.float32))
    img_grid = model.adapter(img_stack)
    grids, nocs_grids = [], []
    for t_idx in chosen:
        t = tset.templates[t_idx]
        stack = model.backbone(torch.as_tensor(t.rgb, dtype=torch.float32))
        grids.append(model.adapter(stack))
        nocs_grids.append(downsample_nocs(t.nocs, t.mask))
    encoded = encoder_forward(grids, nocs_grids, model.encoder)
    decoded = decoder_forward(img_grid, encoded, model.decoder)
    img_tokens, tmpl_tokens = decoded.retained()[4]
    return img_tokens, tmpl_tokens, encoded.origin


def train_loop(
    objects: Sequence[TrainingObject],
    model: PoseModel,
    config: TrainConfig = TrainConfig(),
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    start_step: int = 0,
) -> TrainHistory:
    """Optimize the model on self-rendered correspondence batches.

    Each step draws its own generator from (seed, step), so runs are
    reproducible regardless of scheduling. ``start_step`` resumes a run at an
    absolute step (checkpoints carry only weights, so optimizer moments
    restart). Aborts on a non-finite loss.
    """
    if not objects:
        raise InsufficientDataError("need at least one training object")
    if model.backbone is None:
        raise InsufficientDataError("training requires the trainable backbone")
    if not 0 <= start_step < config.steps:
        raise ValueError(f"start_step {start_step} outside [0, {config.steps})")
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.peak_lr, weight_decay=config.weight_decay
    )
    rows = []
    for step in range(start_step, config.steps):
        rng = np.random.default_rng([config.seed, step])
        obj = objects[int(rng.integers(len(objects)))]
        n_templates = len(obj.template_set.templates)
        k = min(config.templates_per_step, n_templates)
        chosen = np.sort(rng.choice(n_templates, size=k, replace=False))

        rgb, depth, mask, pose, intr = _render_training_view(obj, rng)
        img_tokens, tmpl_tokens, origin = _forward_tokens(model, rgb, obj, chosen)

        img_points, usable = lift_image_patches(depth, mask, pose, intr)
        tmpl_points = lift_template_tokens(obj.template_set, origin, index_map=chosen)
        positives = ground_truth_positives(img_points, usable, tmpl_points)
        image_pool = np.nonzero(usable)[0].astype(np.int64)

        l1_batch = sample_batch(
            TEMPLATE_TO_IMAGE, positives, image_pool, len(tmpl_points), config.loss, rng
        )
        l2_batch = sample_batch(
            IMAGE_TO_TEMPLATE, positives, image_pool, len(tmpl_points), config.loss, rng
        )
        total, l1, l2 = total_contrastive_loss(
            l1_batch, l2_batch, img_tokens, tmpl_tokens, config.loss
        )
        if not bool(torch.isfinite(total)):
            raise NumericalError(f"non-finite loss at step {step}")

        lr = learning_rate(step, config)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        rows.append(
            (step, float(l1.detach()), float(l2.detach()), float(total.detach()), lr)
        )

        if checkpoint_path and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, meta={"step": step + 1})

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, meta={"step": config.steps})
    if log_path:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "L1", "L2", "total", "lr"])
            w.writerows(rows)
    arr = np.asarray(rows, dtype=np.float64)
    return TrainHistory(
        steps=arr[:, 0].astype(np.int64),
        l1=arr[:, 1],
        l2=arr[:, 2],
        total=arr[:, 3],
        lr=arr[:, 4],
    )
