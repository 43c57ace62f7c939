"""Rigid transforms, pinhole cameras, triangle meshes, and viewpoint sampling.

Single pose convention used everywhere: camera-from-object,
``p_cam = R @ p_obj + t``. Pixel coordinates are continuous with pixel (i, j)
covering [j, j+1) x [i, i+1), i.e. the center of the top-left pixel is (0.5, 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateGeometryError,
    MeshFormatError,
    ObjectBehindCameraError,
    ShapeMismatchError,
)


def _readonly(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping object-frame points into the camera frame."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = _readonly(self.rotation)
        t = _readonly(self.translation)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatchError(f"pose shapes {R.shape}, {t.shape}")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(R) < 0:
            raise DegenerateGeometryError(
                f"rotation not orthonormal with det +1 (orthogonality error {err:.2e})"
            )
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to (..., 3) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: first apply ``other``, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: u = fx*x/z + cx, v = fy*y/z + cy."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateGeometryError("focal lengths must be positive")
        if self.width < 14 or self.height < 14:
            raise DegenerateGeometryError("image must be at least 14x14 px")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex RGB colors in [0, 1]."""

    vertices: np.ndarray  # (N, 3) float64, meters
    faces: np.ndarray  # (M, 3) int64
    vertex_colors: np.ndarray | None = None  # (N, 3) float64 in [0, 1]

    def __post_init__(self):
        v = _readonly(self.vertices)
        f = _readonly(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshFormatError(f"vertices shape {v.shape}, expected (N, 3)")
        if f.size and (f.ndim != 2 or f.shape[1] != 3):
            raise MeshFormatError(f"faces shape {f.shape}, expected (M, 3)")
        if f.size == 0:
            f = _readonly(np.zeros((0, 3)), dtype=np.int64)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshFormatError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.vertex_colors is not None:
            c = _readonly(self.vertex_colors)
            if c.shape != v.shape:
                raise MeshFormatError("vertex_colors must match vertices shape")
            object.__setattr__(self, "vertex_colors", c)


def drop_degenerate_faces(mesh: TriangleMesh, eps: float = 1e-12) -> TriangleMesh:
    """Remove faces with (near-)zero area; used as load-time cleanup."""
    if len(mesh.faces) == 0:
        return mesh
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    keep = area2 > eps
    if keep.all():
        return mesh
    return TriangleMesh(mesh.vertices, mesh.faces[keep], mesh.vertex_colors)


@dataclass(frozen=True)
class SimilarityTransform:
    """x_out = scale * x_in + translation (uniform scale, no rotation)."""

    scale: float
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateGeometryError("similarity scale must be positive")
        object.__setattr__(self, "translation", _readonly(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation

    def inverse(self) -> "SimilarityTransform":
        return SimilarityTransform(1.0 / self.scale, -self.translation / self.scale)

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, np.zeros(3))


@dataclass(frozen=True)
class ObjectModel:
    """An onboarded object: normalized mesh plus the bookkeeping to undo it.

    ``mesh`` lives in the normalized frame (unit sphere). ``normalization``
    maps original metric coordinates to that frame. ``diameter`` and
    ``symmetries`` stay in the original metric frame, where evaluation happens.
    """

    mesh: TriangleMesh
    normalization: SimilarityTransform
    diameter: float
    symmetries: tuple[Pose, ...] = field(default_factory=tuple)

    def __post_init__(self):
        norms = np.linalg.norm(self.mesh.vertices, axis=1)
        if norms.size and norms.max() > 1.0 + 1e-6:
            raise DegenerateGeometryError("normalized mesh exceeds unit sphere")
        syms = tuple(self.symmetries)
        if not any(
            np.allclose(s.rotation, np.eye(3), atol=1e-9)
            and np.allclose(s.translation, 0.0, atol=1e-9)
            for s in syms
        ):
            syms = (Pose.identity(),) + syms
        object.__setattr__(self, "symmetries", syms)


@dataclass(frozen=True)
class ViewpointGraph:
    """Camera poses on a geodesic sphere around the object, with angular neighbors."""

    view_poses: tuple[Pose, ...]
    neighbors: np.ndarray  # (V, k) int64, sorted by ascending angular distance
    frequency: int

    def __post_init__(self):
        v = len(self.view_poses)
        if v != 10 * self.frequency**2 + 2:
            raise DegenerateGeometryError(
                f"view count {v} != 10*{self.frequency}^2+2"
            )
        nb = _readonly(self.neighbors, dtype=np.int64)
        if nb.shape != (v, min(6, v - 1)):
            raise ShapeMismatchError(f"neighbors shape {nb.shape}")
        object.__setattr__(self, "view_poses", tuple(self.view_poses))
        object.__setattr__(self, "neighbors", nb)


# ---------------------------------------------------------------------------
# Operations


def normalize_mesh(
    mesh: TriangleMesh,
) -> tuple[TriangleMesh, SimilarityTransform, float]:
    """Center on the vertex mean and scale into the unit sphere.

    Returns (normalized mesh, original->normalized transform, diameter), where
    diameter is the diagonal length of the PCA-oriented bounding box of the
    *input* mesh (original metric units).
    """
    v = mesh.vertices
    if len(v) == 0:
        raise MeshFormatError("mesh has no vertices")
    center = v.mean(axis=0)
    radii = np.linalg.norm(v - center, axis=1)
    rmax = radii.max()
    if rmax < 1e-12:
        raise DegenerateGeometryError("all vertices coincide")
    scale = 1.0 / rmax
    transform = SimilarityTransform(scale, -scale * center)
    normalized = TriangleMesh(transform.apply(v), mesh.faces, mesh.vertex_colors)
    return normalized, transform, obb_diameter(v)


def obb_diameter(vertices: np.ndarray) -> float:
    """Diagonal of the PCA-oriented bounding box of a point set."""
    v = np.asarray(vertices, dtype=np.float64)
    centered = v - v.mean(axis=0)
    cov = centered.T @ centered / max(len(v), 1)
    _, axes = np.linalg.eigh(cov)
    proj = centered @ axes
    extent = proj.max(axis=0) - proj.min(axis=0)
    return float(np.linalg.norm(extent))


# Golden-ratio icosahedron; 12 vertices, 20 faces.
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_VERTS /= np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def icosphere_vertices(frequency: int) -> np.ndarray:
    """Class-I geodesic sphere vertices: each icosahedron edge split into
    ``frequency`` segments, grid points pushed to the unit sphere, duplicates
    merged. Returns (10*frequency^2 + 2, 3) unit vectors in deterministic order.
    """
    if frequency < 1:
        raise DegenerateGeometryError("frequency must be >= 1")
    f = int(frequency)
    pts = []
    for fa, fb, fc in _ICO_FACES:
        A, B, C = _ICO_VERTS[fa], _ICO_VERTS[fb], _ICO_VERTS[fc]
        for i in range(f + 1):
            for j in range(f + 1 - i):
                p = ((f - i - j) * A + i * B + j * C) / f
                pts.append(p / np.linalg.norm(p))
    pts = np.array(pts)
    # Merge duplicates on shared edges/corners; keys are rounded coordinates.
    seen: dict[tuple, int] = {}
    order = []
    for idx, p in enumerate(pts):
        key = tuple(np.round(p, 9) + 0.0)  # +0.0 folds -0.0 into 0.0
        if key not in seen:
            seen[key] = idx
            order.append(idx)
    return np.ascontiguousarray(pts[order])


def look_at_pose(
    camera_position: np.ndarray,
    target: np.ndarray,
    up_hint: np.ndarray = (0.0, 0.0, 1.0),
) -> Pose:
    """Camera pose whose +z axis points from ``camera_position`` at ``target``.

    Falls back to global +x as up when ``up_hint`` is parallel to the view axis.
    """
    pos = np.asarray(camera_position, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    fwd = tgt - pos
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise DegenerateGeometryError("camera position coincides with target")
    z = fwd / dist
    up = np.asarray(up_hint, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross([1.0, 0.0, 0.0], z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows are the camera axes in object coordinates
    return Pose(R, -R @ pos)


def build_viewpoint_graph(frequency: int, radius: float) -> ViewpointGraph:
    """Look-at cameras on an icosphere of the given radius around the origin.

    Each view gets the min(6, V-1) angularly nearest other views as neighbors,
    sorted by ascending angle (stable on ties).
    """
    if not radius > 0:
        raise DegenerateGeometryError("radius must be positive")
    dirs = icosphere_vertices(frequency)
    poses = tuple(look_at_pose(radius * d, np.zeros(3)) for d in dirs)
    cosang = np.clip(dirs @ dirs.T, -1.0, 1.0)
    ang = np.arccos(cosang)
    np.fill_diagonal(ang, np.inf)
    k = min(6, len(dirs) - 1)
    neighbors = np.argsort(ang, axis=1, kind="stable")[:, :k]
    return ViewpointGraph(poses, neighbors, frequency)


def project(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Project (..., 3) camera-frame points to (..., 2) pixel coordinates."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 1e-9):
        raise ObjectBehindCameraError("point at or behind the camera plane")
    u = intrinsics.fx * p[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * p[..., 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1)


def back_project(
    pixels: np.ndarray, depths: np.ndarray, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Inverse of :func:`project` at known depth: (..., 2) px + (...,) z -> (..., 3)."""
    uv = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)
    x = (uv[..., 0] - intrinsics.cx) * z / intrinsics.fx
    y = (uv[..., 1] - intrinsics.cy) * z / intrinsics.fy
    return np.stack([x, y, z], axis=-1)


def rotation_geodesic_deg(a: Pose, b: Pose) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos = (np.trace(a.rotation @ b.rotation.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def axis_angle_rotation(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n < 1e-12:
        raise DegenerateGeometryError("rotation axis has zero length")
    x, y, z = a / n
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)
