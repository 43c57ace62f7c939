"""Deterministic software rasterizer and template-set persistence.

Renders RGB / depth / NOCS / mask images of a normalized mesh from arbitrary
camera poses. NOCS encodes the normalized object frame into colors:
``nocs = (p_obj + 1) / 2``, so the unit sphere maps into [0, 1]^3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    CheckpointFormatError,
    DegenerateGeometryError,
    ObjectBehindCameraError,
    ShapeMismatchError,
)
from .geometry import (
    CameraIntrinsics,
    ObjectModel,
    Pose,
    SimilarityTransform,
    TriangleMesh,
    ViewpointGraph,
    build_viewpoint_graph,
)

AMBIENT = 0.3  # flat ambient term of the head-light shading
PATCH = 14  # patch side in pixels; image sides must be multiples of this

# Template cameras: fx = fy = 2*resolution puts tan(fov/2) = 1/4; with the
# 1.25 margin below, the unit-sphere object spans ~80% of the frame.
TEMPLATE_FOCAL_FACTOR = 2.0
TEMPLATE_FILL_MARGIN = 1.25


@dataclass(frozen=True)
class TemplateImage:
    """One rendered view: colors, metric depth, NOCS, and foreground mask."""

    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 meters, 0 on background
    nocs: np.ndarray  # (H, W, 3) float32 in [0, 1], 0 on background
    mask: np.ndarray  # (H, W) bool
    view_pose: Pose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3) or self.nocs.shape != (h, w, 3):
            raise ShapeMismatchError("template buffers disagree on size")
        if self.mask.shape != (h, w):
            raise ShapeMismatchError("mask size mismatch")


@dataclass(frozen=True)
class TemplateSet:
    """All templates of one onboarded object plus its viewpoint graph."""

    templates: tuple[TemplateImage, ...]
    graph: ViewpointGraph
    object_id: str
    normalization: SimilarityTransform
    diameter: float

    def __post_init__(self):
        if len(self.templates) != len(self.graph.view_poses):
            raise ShapeMismatchError("template count != view count")
        object.__setattr__(self, "templates", tuple(self.templates))

    @property
    def resolution(self) -> int:
        return self.templates[0].depth.shape[0]


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _covered(w, dx, dy):
    # top-left fill rule: boundary pixels belong to edges whose interior side
    # is to the right (dy < 0) or below a horizontal top edge (dy == 0, dx > 0)
    top_left = (dy < 0) | ((dy == 0) & (dx > 0))
    return (w > 0) | ((w == 0) & top_left)


def rasterize(
    mesh: TriangleMesh,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    shading: str = "lambertian",
    nocs_transform: SimilarityTransform | None = None,
) -> TemplateImage:
    """Z-buffered perspective rasterization with perspective-correct attributes.

    ``shading`` is ``"lambertian"`` (white material, head-light along the
    camera axis, flat per-face) or ``"vertex_color"`` (interpolation only).
    ``nocs_transform`` maps object-frame hit points into the coordinate frame
    used for the NOCS encoding; pass the mesh's normalization when rendering
    an original metric mesh so the NOCS channels stay in [0, 1].
    """
    if shading not in ("lambertian", "vertex_color"):
        raise ValueError(f"unknown shading {shading!r}")
    if shading == "vertex_color" and mesh.vertex_colors is None:
        raise ValueError("vertex_color shading requires per-vertex colors")

    H, W = intrinsics.height, intrinsics.width
    cam = pose.transform(mesh.vertices)
    z = cam[:, 2]
    if len(z) == 0 or (z <= 0).all():
        raise ObjectBehindCameraError("no mesh vertex in front of the camera")
    zsafe = np.where(z > 1e-6, z, np.nan)
    u = intrinsics.fx * cam[:, 0] / zsafe + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / zsafe + intrinsics.cy

    zbuf = np.full((H, W), np.inf, dtype=np.float64)
    pos = np.zeros((H, W, 3), dtype=np.float64)  # object-frame hit point
    rgb = np.zeros((H, W, 3), dtype=np.float64)

    obj = mesh.vertices
    colors = mesh.vertex_colors

    for face in mesh.faces:
        i0, i1, i2 = (int(face[0]), int(face[1]), int(face[2]))
        if not (z[i0] > 1e-6 and z[i1] > 1e-6 and z[i2] > 1e-6):
            continue  # near-plane culling at triangle granularity
        area = _edge(u[i0], v[i0], u[i1], v[i1], u[i2], v[i2])
        if area < 0:  # reorder to positive orientation in screen space
            i1, i2 = i2, i1
            area = -area
        if area < 1e-12:
            continue

        us = (u[i0], u[i1], u[i2])
        vs = (v[i0], v[i1], v[i2])
        x0 = max(int(np.floor(min(us) - 0.5)), 0)
        x1 = min(int(np.ceil(max(us) - 0.5)), W - 1)
        y0 = max(int(np.floor(min(vs) - 0.5)), 0)
        y1 = min(int(np.ceil(max(vs) - 0.5)), H - 1)
        if x1 < x0 or y1 < y0:
            continue
        px = np.arange(x0, x1 + 1) + 0.5
        py = (np.arange(y0, y1 + 1) + 0.5)[:, None]

        w0 = _edge(us[1], vs[1], us[2], vs[2], px, py)
        w1 = _edge(us[2], vs[2], us[0], vs[0], px, py)
        w2 = _edge(us[0], vs[0], us[1], vs[1], px, py)
        inside = (
            _covered(w0, us[2] - us[1], vs[2] - vs[1])
            & _covered(w1, us[0] - us[2], vs[0] - vs[2])
            & _covered(w2, us[1] - us[0], vs[1] - vs[0])
        )
        if not inside.any():
            continue

        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        inv_z = l0 / z[i0] + l1 / z[i1] + l2 / z[i2]
        depth = 1.0 / inv_z
        tile = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        closer = inside & (depth < tile)
        if not closer.any():
            continue

        def lerp(a0, a1, a2):
            num = (
                l0[..., None] * (a0 / z[i0])
                + l1[..., None] * (a1 / z[i1])
                + l2[..., None] * (a2 / z[i2])
            )
            return num * depth[..., None]

        hit = lerp(obj[i0], obj[i1], obj[i2])
        if shading == "vertex_color":
            shade = lerp(colors[i0], colors[i1], colors[i2])
        else:
            e1 = cam[i1] - cam[i0]
            e2 = cam[i2] - cam[i0]
            n = np.cross(e1, e2)
            nn = np.linalg.norm(n)
            cos = abs(n[2]) / nn if nn > 0 else 0.0
            shade = np.full(hit.shape, AMBIENT + (1.0 - AMBIENT) * cos)

        tile[closer] = depth[closer]
        pos[y0 : y1 + 1, x0 : x1 + 1][closer] = hit[closer]
        rgb[y0 : y1 + 1, x0 : x1 + 1][closer] = shade[closer]

    mask = np.isfinite(zbuf)
    depth_img = np.where(mask, zbuf, 0.0).astype(np.float32)
    if nocs_transform is not None:
        pos = nocs_transform.apply(pos.reshape(-1, 3)).reshape(pos.shape)
    nocs = np.clip((pos + 1.0) / 2.0, 0.0, 1.0)
    nocs[~mask] = 0.0
    return TemplateImage(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=depth_img,
        nocs=nocs.astype(np.float32),
        mask=mask,
        view_pose=pose,
        intrinsics=intrinsics,
    )


def template_intrinsics(resolution: int) -> CameraIntrinsics:
    f = TEMPLATE_FOCAL_FACTOR * resolution
    return CameraIntrinsics(f, f, resolution / 2.0, resolution / 2.0,
                            resolution, resolution)


def template_camera_radius(resolution: int) -> float:
    intr = template_intrinsics(resolution)
    tan_half_fov = (resolution / 2.0) / intr.fx
    return TEMPLATE_FILL_MARGIN / tan_half_fov


def render_template_set(
    model: ObjectModel, frequency: int, resolution: int, object_id: str = ""
) -> TemplateSet:
    """Render one template per icosphere viewpoint around the normalized mesh."""
    if resolution % PATCH != 0:
        raise ValueError(f"resolution must be a multiple of {PATCH}")
    intr = template_intrinsics(resolution)
    graph = build_viewpoint_graph(frequency, template_camera_radius(resolution))
    shading = "vertex_color" if model.mesh.vertex_colors is not None else "lambertian"
    templates = []
    for pose in graph.view_poses:
        t = rasterize(model.mesh, pose, intr, shading=shading)
        if not t.mask.any():
            raise DegenerateGeometryError("rendered template has empty mask")
        templates.append(t)
    return TemplateSet(
        templates=tuple(templates),
        graph=graph,
        object_id=object_id,
        normalization=model.normalization,
        diameter=model.diameter,
    )


# ---------------------------------------------------------------------------
# Persistence: meta.json + rgb_%03d.png / depth_%03d.png / nocs_%03d.png

DEPTH_UNIT_M = 1e-4  # 16-bit depth PNG stores 0.1 mm units
_DEPTH_MAX_M = 65535 * DEPTH_UNIT_M


def save_template_set(tset: TemplateSet, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for i, t in enumerate(tset.templates):
        if t.depth.max(initial=0.0) > _DEPTH_MAX_M:
            raise ValueError(f"depth exceeds {_DEPTH_MAX_M:.4f} m encodable range")
        rgb8 = np.round(t.rgb * 255.0).astype(np.uint8)
        cv2.imwrite(str(directory / f"rgb_{i:03d}.png"), rgb8[:, :, ::-1])
        d16 = np.round(t.depth / DEPTH_UNIT_M).astype(np.uint16)
        cv2.imwrite(str(directory / f"depth_{i:03d}.png"), d16)
        n16 = np.round(t.nocs.astype(np.float64) * 65535.0).astype(np.uint16)
        cv2.imwrite(str(directory / f"nocs_{i:03d}.png"), n16[:, :, ::-1])
        views.append(
            {
                "rotation": t.view_pose.rotation.reshape(-1).tolist(),
                "translation": t.view_pose.translation.tolist(),
                "intrinsics": {
                    "fx": t.intrinsics.fx, "fy": t.intrinsics.fy,
                    "cx": t.intrinsics.cx, "cy": t.intrinsics.cy,
                    "width": t.intrinsics.width, "height": t.intrinsics.height,
                },
                "neighbors": [int(j) for j in tset.graph.neighbors[i]],
            }
        )
    meta = {
        "object_id": tset.object_id,
        "frequency": tset.graph.frequency,
        "diameter": tset.diameter,
        "normalization": {
            "scale": tset.normalization.scale,
            "translation": tset.normalization.translation.tolist(),
        },
        "views": views,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1))


def load_template_set(directory: str | Path) -> TemplateSet:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no meta.json in {directory}")
    try:
        meta = json.loads(meta_path.read_text())
        frequency = int(meta["frequency"])
        views = meta["views"]
    except (ValueError, KeyError) as e:
        raise CheckpointFormatError(f"corrupt meta.json: {e}") from e
    expected = 10 * frequency**2 + 2
    if len(views) != expected:
        raise CheckpointFormatError(
            f"meta lists {len(views)} views, expected {expected}"
        )

    poses, templates, neighbors = [], [], []
    for i, view in enumerate(views):
        pose = Pose(
            np.asarray(view["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(view["translation"], dtype=np.float64),
        )
        ci = view["intrinsics"]
        intr = CameraIntrinsics(
            ci["fx"], ci["fy"], ci["cx"], ci["cy"], int(ci["width"]), int(ci["height"])
        )
        rgb8 = cv2.imread(str(directory / f"rgb_{i:03d}.png"), cv2.IMREAD_COLOR)
        d16 = cv2.imread(str(directory / f"depth_{i:03d}.png"), cv2.IMREAD_UNCHANGED)
        n16 = cv2.imread(str(directory / f"nocs_{i:03d}.png"), cv2.IMREAD_UNCHANGED)
        if rgb8 is None or d16 is None or n16 is None:
            raise CheckpointFormatError(f"missing or unreadable images for view {i}")
        if d16.dtype != np.uint16 or n16.dtype != np.uint16:
            raise CheckpointFormatError(f"view {i}: depth/nocs must be 16-bit PNG")
        depth = (d16.astype(np.float64) * DEPTH_UNIT_M).astype(np.float32)
        templates.append(
            TemplateImage(
                rgb=(rgb8[:, :, ::-1].astype(np.float32) / 255.0),
                depth=depth,
                nocs=(n16[:, :, ::-1].astype(np.float32) / 65535.0),
                mask=depth > 0,
                view_pose=pose,
                intrinsics=intr,
            )
        )
        poses.append(pose)
        neighbors.append(view["neighbors"])

    graph = ViewpointGraph(
        tuple(poses), np.asarray(neighbors, dtype=np.int64), frequency
    )
    norm = meta["normalization"]
    return TemplateSet(
        templates=tuple(templates),
        graph=graph,
        object_id=str(meta["object_id"]),
        normalization=SimilarityTransform(
            float(norm["scale"]), np.asarray(norm["translation"], dtype=np.float64)
        ),
        diameter=float(meta["diameter"]),
    )
