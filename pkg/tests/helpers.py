"""Shared fixtures-in-spirit: oracle tokens and synthetic scene plumbing."""

import numpy as np
import torch

from posekit.features import downsample_nocs, oracle_backbone


def oracle_template_tokens(template_set, dim=24):
    """Geometry-derived tokens for every foreground patch of every template.

    Returns (tokens (M, dim) torch, origin (M, 3) int64: template/row/col),
    matching the provenance layout the encoder emits.
    """
    toks, origin = [], []
    for idx, t in enumerate(template_set.templates):
        grid = oracle_backbone(t.nocs, t.mask, dim=dim)
        _, patch_mask = downsample_nocs(t.nocs, t.mask)
        for r, c in zip(*np.nonzero(patch_mask)):
            toks.append(grid.data[r, c])
            origin.append((idx, r, c))
    return torch.stack(toks), np.asarray(origin, dtype=np.int64)


def oracle_image_tokens(nocs, mask, dim=24):
    """Flattened oracle descriptor grid for a crop: ((Hp*Wp, dim), (Hp, Wp))."""
    grid = oracle_backbone(nocs, mask, dim=dim)
    Hp, Wp, d = grid.data.shape
    return grid.data.reshape(Hp * Wp, d), (Hp, Wp)


def view_direction(pose):
    """Unit vector from the object origin toward the camera, object frame."""
    center = -pose.rotation.T @ pose.translation
    return center / np.linalg.norm(center)
