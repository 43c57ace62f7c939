"""Pose-error metrics, dataset aggregation, and the result-table format.

Surface and projection distances are symmetry-aware maxima over mesh
vertices; the depth metric compares rendered distance maps on the visible
pixel set. Aggregation follows the recall-over-threshold-grid recipe with an
11-point interpolated precision variant for detection-style scoring.

All point transforms here are spelled out column by column so a per-vertex
reference loop reproduces the arrays bit for bit; keep it that way.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ObjectBehindCameraError, ResultFormatError
from .geometry import CameraIntrinsics, ObjectModel, Pose, TriangleMesh
from .rendering import rasterize

VSD_DELTA_M = 0.015  # visibility tolerance when comparing against scene depth
ERROR_FRACTIONS = tuple(round(0.05 * k, 2) for k in range(1, 11))  # 5% .. 50%
VSD_THRESHOLDS = ERROR_FRACTIONS  # correctness thresholds on the [0,1] error
MSPD_BASE_PX = tuple(5.0 * k for k in range(1, 11))  # scaled by image_width/640


def _transform(pose: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply a rigid pose with explicit per-column arithmetic."""
    R, t = pose.rotation, pose.translation
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return np.stack(
        [
            R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0],
            R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1],
            R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2],
        ],
        axis=1,
    )


def _project_cols(cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    u = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
    v = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
    return np.stack([u, v], axis=1)


def _metric_vertices(model: ObjectModel) -> np.ndarray:
    return model.normalization.inverse().apply(model.mesh.vertices)


def e_mssd(est: Pose, gt: Pose, model: ObjectModel) -> float:
    """Symmetry-minimized maximum vertex distance, meters."""
    verts = _metric_vertices(model)
    est_pts = _transform(est, verts)
    best = np.inf
    for sym in model.symmetries:
        gt_pts = _transform(gt, _transform(sym, verts))
        d = np.sqrt(((est_pts - gt_pts) ** 2).sum(axis=1))
        best = min(best, d.max())
    return float(best)


def e_mspd(
    est: Pose, gt: Pose, model: ObjectModel, intrinsics: CameraIntrinsics
) -> float:
    """Symmetry-minimized maximum projected vertex distance, pixels."""
    verts = _metric_vertices(model)
    est_cam = _transform(est, verts)
    if est_cam[:, 2].min() <= 0:
        raise ObjectBehindCameraError("estimated pose puts vertices behind the camera")
    est_px = _project_cols(est_cam, intrinsics)
    best = np.inf
    for sym in model.symmetries:
        gt_cam = _transform(gt, _transform(sym, verts))
        if gt_cam[:, 2].min() <= 0:
            raise ObjectBehindCameraError(
                "ground-truth pose puts vertices behind the camera"
            )
        gt_px = _project_cols(gt_cam, intrinsics)
        d = np.sqrt(((est_px - gt_px) ** 2).sum(axis=1))
        best = min(best, d.max())
    return float(best)


@dataclass(frozen=True)
class VsdResult:
    value: float
    empty_visibility: bool  # object fully occluded in both renders


def e_vsd_detailed(
    est: Pose,
    gt: Pose,
    model: ObjectModel,
    intrinsics: CameraIntrinsics,
    scene_depth: np.ndarray,
    tau: float,
    delta: float = VSD_DELTA_M,
) -> VsdResult:
    """Visible-surface depth discrepancy.

    Renders both poses, keeps pixels whose rendered depth is within ``delta``
    of the scene depth (i.e. actually visible), and scores the fraction of the
    visible union where the two depth maps disagree by ``tau`` or more.
    """
    d_est, d_gt, scene = _vsd_depths(est, gt, model, intrinsics, scene_depth)
    return _vsd_from_depths(d_est, d_gt, scene, tau, delta)


def _vsd_depths(est, gt, model, intrinsics, scene_depth):
    mesh = TriangleMesh(
        _metric_vertices(model), model.mesh.faces, model.mesh.vertex_colors
    )
    d_est = rasterize(mesh, est, intrinsics, nocs_transform=model.normalization).depth
    d_gt = rasterize(mesh, gt, intrinsics, nocs_transform=model.normalization).depth
    scene = np.asarray(scene_depth, dtype=np.float64)
    if scene.shape != d_est.shape:
        raise ResultFormatError(
            f"scene depth {scene.shape} does not match render {d_est.shape}"
        )
    return d_est, d_gt, scene


def _vsd_from_depths(d_est, d_gt, scene, tau, delta) -> VsdResult:
    v_est = (d_est > 0) & (d_est <= scene + delta)
    v_gt = (d_gt > 0) & (d_gt <= scene + delta)
    union = v_est | v_gt
    n_union = int(union.sum())
    if n_union == 0:
        return VsdResult(1.0, True)
    ok = v_est & v_gt & (np.abs(d_est - d_gt) < tau)
    return VsdResult(float((n_union - int(ok.sum())) / n_union), False)


def vsd_curve(
    est: Pose,
    gt: Pose,
    model: ObjectModel,
    intrinsics: CameraIntrinsics,
    scene_depth: np.ndarray,
    taus: Sequence[float],
    delta: float = VSD_DELTA_M,
) -> tuple[float, ...]:
    """e_vsd over several taus with the pose renders computed once."""
    d_est, d_gt, scene = _vsd_depths(est, gt, model, intrinsics, scene_depth)
    return tuple(
        _vsd_from_depths(d_est, d_gt, scene, tau, delta).value for tau in taus
    )


def e_vsd(
    est: Pose,
    gt: Pose,
    model: ObjectModel,
    intrinsics: CameraIntrinsics,
    scene_depth: np.ndarray,
    tau: float,
    delta: float = VSD_DELTA_M,
) -> float:
    return e_vsd_detailed(est, gt, model, intrinsics, scene_depth, tau, delta).value


# ---------------------------------------------------------------------------
# dataset aggregation


@dataclass(frozen=True)
class EstimateErrors:
    """Errors of one pose estimate against its ground truth."""

    mssd: float  # meters
    mspd: float  # pixels
    vsd: tuple[float, ...]  # one value per tau in ERROR_FRACTIONS * diameter
    diameter: float  # meters, of the object of this estimate
    image_width: int

    def __post_init__(self):
        if len(self.vsd) != len(ERROR_FRACTIONS):
            raise ValueError(
                f"expected {len(ERROR_FRACTIONS)} depth-error values, got {len(self.vsd)}"
            )


@dataclass(frozen=True)
class ARReport:
    ar_vsd: float
    ar_mssd: float
    ar_mspd: float
    ar: float
    recalls_vsd: tuple[tuple[float, ...], ...]  # [tau index][threshold index]
    recalls_mssd: tuple[float, ...]
    recalls_mspd: tuple[float, ...]

    def as_dict(self) -> dict:
        return {
            "AR_VSD": self.ar_vsd,
            "AR_MSSD": self.ar_mssd,
            "AR_MSPD": self.ar_mspd,
            "AR": self.ar,
            "recalls": {
                "vsd": [list(r) for r in self.recalls_vsd],
                "mssd": list(self.recalls_mssd),
                "mspd": list(self.recalls_mspd),
            },
        }


def aggregate_ar(errors: Sequence[EstimateErrors]) -> ARReport:
    """Average recall over the standard threshold grids.

    A pose counts as correct when its error is strictly below the threshold:
    fractions of object diameter for the surface metric, multiples of
    image_width/640 pixels for the projection metric, and the fixed [0,1]
    grid for the depth metric (already computed per tau).
    """
    if not errors:
        raise ValueError("cannot aggregate an empty error list")
    n = len(errors)

    recalls_mssd = tuple(
        sum(e.mssd < f * e.diameter for e in errors) / n for f in ERROR_FRACTIONS
    )
    recalls_mspd = tuple(
        sum(e.mspd < b * e.image_width / 640.0 for e in errors) / n
        for b in MSPD_BASE_PX
    )
    recalls_vsd = tuple(
        tuple(sum(e.vsd[ti] < th for e in errors) / n for th in VSD_THRESHOLDS)
        for ti in range(len(ERROR_FRACTIONS))
    )
    ar_vsd = float(np.mean([r for row in recalls_vsd for r in row]))
    ar_mssd = float(np.mean(recalls_mssd))
    ar_mspd = float(np.mean(recalls_mspd))
    return ARReport(
        ar_vsd=ar_vsd,
        ar_mssd=ar_mssd,
        ar_mspd=ar_mspd,
        ar=(ar_vsd + ar_mspd + ar_mssd) / 3.0,
        recalls_vsd=recalls_vsd,
        recalls_mssd=recalls_mssd,
        recalls_mspd=recalls_mspd,
    )


@dataclass(frozen=True)
class Detection:
    """A scored estimate plus its errors against the targeted ground truth."""

    image_id: int
    object_id: int
    score: float
    mssd: float
    mspd: float
    diameter: float
    image_width: int


@dataclass(frozen=True)
class APReport:
    ap_mssd: float
    ap_mspd: float
    ap: float

    def as_dict(self) -> dict:
        return {"AP_MSSD": self.ap_mssd, "AP_MSPD": self.ap_mspd, "AP": self.ap}


def _ap_11point(tp_flags: np.ndarray, total_gt: int) -> float:
    """11-point interpolated average precision over a score-ranked TP/FP list."""
    if total_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / total_gt
    precision = tp / (tp + fp)
    pts = []
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        pts.append(precision[mask].max() if mask.any() else 0.0)
    return float(np.mean(pts))


def aggregate_ap(
    detections: Sequence[Detection], gt_counts: Mapping[tuple[int, int], int]
) -> APReport:
    """Average precision with greedy score-ordered ground-truth assignment.

    Within each (image, object) group, the highest-scored detections claim
    the available ground-truth instances; at a given error threshold a claim
    is a true positive when its error is below the threshold. This is a
    deliberately simplified detection protocol: one error value per detection
    (against its targeted instance) rather than a full pairwise matrix.
    """
    total_gt = sum(gt_counts.values())
    order = sorted(
        range(len(detections)), key=lambda i: (-detections[i].score, i)
    )

    def ap_for(metric: str, grid) -> float:
        vals = []
        for thr_index in range(len(grid)):
            claims: dict[tuple[int, int], int] = {}
            flags = []
            for i in order:
                d = detections[i]
                key = (d.image_id, d.object_id)
                if metric == "mssd":
                    ok = d.mssd < grid[thr_index] * d.diameter
                else:
                    ok = d.mspd < grid[thr_index] * d.image_width / 640.0
                have = claims.get(key, 0)
                if ok and have < gt_counts.get(key, 0):
                    claims[key] = have + 1
                    flags.append(True)
                else:
                    flags.append(False)
            vals.append(_ap_11point(np.asarray(flags, dtype=bool), total_gt))
        return float(np.mean(vals))

    ap_mssd = ap_for("mssd", ERROR_FRACTIONS)
    ap_mspd = ap_for("mspd", MSPD_BASE_PX)
    return APReport(ap_mssd=ap_mssd, ap_mspd=ap_mspd, ap=(ap_mspd + ap_mssd) / 2.0)


# ---------------------------------------------------------------------------
# result tables


@dataclass(frozen=True)
class ResultRow:
    scene_id: int
    im_id: int
    obj_id: int
    score: float
    pose: Pose  # translation in meters; serialized in millimeters
    time_s: float


_HEADER = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]


def write_results(path: str | Path, rows: Sequence[ResultRow]) -> None:
    """Comma-separated result table; R row-major, t in millimeters, %.9g."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_HEADER)
        for r in rows:
            w.writerow(
                [
                    r.scene_id,
                    r.im_id,
                    r.obj_id,
                    f"{r.score:.9g}",
                    " ".join(f"{x:.9g}" for x in r.pose.rotation.ravel()),
                    " ".join(f"{x:.9g}" for x in r.pose.translation * 1000.0),
                    f"{r.time_s:.9g}",
                ]
            )


def read_results(path: str | Path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ResultFormatError(f"{path}: empty file") from None
        if header != _HEADER:
            raise ResultFormatError(f"{path}: unexpected header {header}")
        for ln, rec in enumerate(reader, start=2):
            try:
                if len(rec) != 7:
                    raise ValueError(f"{len(rec)} fields")
                R = np.array([float(x) for x in rec[4].split()]).reshape(3, 3)
                t_mm = np.array([float(x) for x in rec[5].split()])
                if t_mm.shape != (3,):
                    raise ValueError("t needs 3 values")
                rows.append(
                    ResultRow(
                        scene_id=int(rec[0]),
                        im_id=int(rec[1]),
                        obj_id=int(rec[2]),
                        score=float(rec[3]),
                        pose=Pose(R, t_mm / 1000.0),
                        time_s=float(rec[6]),
                    )
                )
            except (ValueError, IndexError) as exc:
                raise ResultFormatError(f"{path}: bad row at line {ln}: {exc}") from exc
    return rows
