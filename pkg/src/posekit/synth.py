"""Synthetic meshes and scenes for tests, training data, and demos.

Scene files are .npz archives with keys: rgb (H,W,3 uint8), depth (H,W float32
meters), nocs (H,W,3 float32, normalized-object-frame encoding), mask (H,W
bool), K (3,3 float64), and optionally R (3,3) / t (3,) — the ground-truth
camera-from-object pose in the original metric frame — plus object_id.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    ObjectModel,
    Pose,
    SimilarityTransform,
    TriangleMesh,
    icosphere_vertices,
    look_at_pose,
    normalize_mesh,
)
from .rendering import TemplateImage, rasterize
from .errors import CheckpointFormatError


def icosphere_mesh(frequency: int, radius: float = 1.0) -> TriangleMesh:
    """Triangulated geodesic sphere (same vertex set as icosphere_vertices)."""
    verts = icosphere_vertices(frequency) * radius
    key_to_idx = {tuple(np.round(v / radius, 9) + 0.0): i for i, v in enumerate(verts)}

    from .geometry import _ICO_FACES, _ICO_VERTS  # base solid tables

    f = int(frequency)
    faces = []
    for fa, fb, fc in _ICO_FACES:
        A, B, C = _ICO_VERTS[fa], _ICO_VERTS[fb], _ICO_VERTS[fc]

        def gidx(i, j):
            p = ((f - i - j) * A + i * B + j * C) / f
            p = p / np.linalg.norm(p)
            return key_to_idx[tuple(np.round(p, 9) + 0.0)]

        for i in range(f):
            for j in range(f - i):
                faces.append((gidx(i, j), gidx(i + 1, j), gidx(i, j + 1)))
                if i + j < f - 1:
                    faces.append((gidx(i + 1, j), gidx(i + 1, j + 1), gidx(i, j + 1)))
    return TriangleMesh(verts, np.asarray(faces, dtype=np.int64))


def box_mesh(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    ex, ey, ez = np.asarray(extents, dtype=np.float64) / 2.0
    c = np.asarray(center, dtype=np.float64)
    verts = np.array(
        [[sx * ex, sy * ey, sz * ez] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    ) + c
    # 12 triangles, outward winding
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ],
        dtype=np.int64,
    )
    return TriangleMesh(verts, faces)


def blob_mesh(seed: int, frequency: int = 6, scale: float = 0.08) -> TriangleMesh:
    """Asymmetric textured test object: a radially-perturbed colored sphere.

    Random directional bumps break all symmetries; a smooth trigonometric
    color field gives every surface region a distinct appearance.
    """
    rng = np.random.default_rng(seed)
    base = icosphere_mesh(frequency)
    dirs = rng.normal(size=(8, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(-1.5, 1.5, size=8)
    widths = rng.uniform(0.1, 0.35, size=8)
    v = base.vertices
    r = np.ones(len(v)) * (1.0 + scale * rng.uniform(-0.5, 0.5))
    for d, a, w in zip(dirs, amps, widths):
        r += scale * a * np.exp((v @ d - 1.0) / w)
    verts = v * r[:, None] * 0.05  # ~10 cm object, desk scale
    freqs = rng.uniform(20.0, 60.0, size=(3, 3))
    phases = rng.uniform(0, 2 * np.pi, size=3)
    colors = 0.5 + 0.5 * np.sin(verts @ freqs.T + phases)
    return TriangleMesh(verts, base.faces, np.clip(colors, 0.0, 1.0))


def make_object_model(mesh: TriangleMesh, symmetries=()) -> ObjectModel:
    normalized, transform, diameter = normalize_mesh(mesh)
    return ObjectModel(normalized, transform, diameter, tuple(symmetries))


def render_scene(
    mesh: TriangleMesh,
    normalization: SimilarityTransform,
    pose: Pose,
    intrinsics: CameraIntrinsics,
) -> TemplateImage:
    """Rasterize the original metric mesh, with NOCS in the normalized frame."""
    return rasterize(
        mesh,
        pose,
        intrinsics,
        shading="vertex_color" if mesh.vertex_colors is not None else "lambertian",
        nocs_transform=normalization,
    )


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the unit sphere."""
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_scene_pose(
    rng: np.random.Generator,
    mesh: TriangleMesh,
    intrinsics: CameraIntrinsics,
    distance_range: tuple[float, float] = (0.35, 0.8),
    center_jitter: float = 0.25,
) -> Pose:
    """A camera pose that keeps the whole object inside the frame."""
    extent = np.linalg.norm(
        mesh.vertices - mesh.vertices.mean(axis=0), axis=1
    ).max()
    for _ in range(100):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        dist = rng.uniform(*distance_range)
        center = mesh.vertices.mean(axis=0)
        cam_pos = center + direction * dist
        up = rng.normal(size=3)
        pose = look_at_pose(cam_pos, center, up)
        # shift the principal point target a little for off-center objects
        jitter = rng.uniform(-center_jitter, center_jitter, size=2) * dist
        pose = Pose(pose.rotation, pose.translation - np.array([*jitter, 0.0]))
        cam_pts = pose.transform(mesh.vertices)
        if cam_pts[:, 2].min() <= extent * 0.1:
            continue
        u = intrinsics.fx * cam_pts[:, 0] / cam_pts[:, 2] + intrinsics.cx
        v = intrinsics.fy * cam_pts[:, 1] / cam_pts[:, 2] + intrinsics.cy
        margin = 4.0
        if (
            u.min() > margin and u.max() < intrinsics.width - margin
            and v.min() > margin and v.max() < intrinsics.height - margin
        ):
            return pose
    raise RuntimeError("could not place object in frame; widen distance_range")


def save_scene(
    path: str | Path,
    image: TemplateImage,
    object_id: str = "",
    gt_pose: Pose | None = None,
) -> None:
    data = {
        "rgb": np.round(image.rgb * 255.0).astype(np.uint8),
        "depth": image.depth.astype(np.float32),
        "nocs": image.nocs.astype(np.float32),
        "mask": image.mask,
        "K": image.intrinsics.matrix,
        "width": np.int64(image.intrinsics.width),
        "height": np.int64(image.intrinsics.height),
        "object_id": np.str_(object_id),
    }
    if gt_pose is not None:
        data["R"] = gt_pose.rotation
        data["t"] = gt_pose.translation
    np.savez_compressed(path, **data)


def load_scene(path: str | Path) -> dict:
    """Load a scene archive into a plain dict (pose entries may be absent)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with np.load(path, allow_pickle=False) as z:
        if "rgb" not in z or "K" not in z:
            raise CheckpointFormatError(f"{path}: scene file missing rgb/K")
        out = {k: z[k] for k in z.files}
    K = out["K"]
    h, w = out["rgb"].shape[:2]
    out["intrinsics"] = CameraIntrinsics(
        float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), w, h
    )
    if "R" in out and "t" in out:
        out["gt_pose"] = Pose(out["R"], out["t"])
    return out
