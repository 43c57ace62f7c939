"""Pose-from-correspondences solvers and a consensus wrapper.

The primary solver follows the sequential-quadratic PnP scheme: pose recovery
becomes a 9-dimensional quadratic program over vectorized rotations (with the
translation eliminated in closed form), refined on the rotation manifold via
SQP steps on the six orthonormality constraints. Everything is written against
stacked arrays so the consensus loop can evaluate hundreds of minimal samples
in one shot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InsufficientDataError,
    NoConsensusError,
)
from .geometry import CameraIntrinsics, Pose

SQP_MAX_ITERS = 15
SQP_STEP_TOL = 1e-10


def _bearings(pixels: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates -> normalized image-plane coordinates (x~, y~)."""
    p = np.asarray(pixels, dtype=np.float64)
    return np.stack(
        [
            (p[..., 0] - intrinsics.cx) / intrinsics.fx,
            (p[..., 1] - intrinsics.cy) / intrinsics.fy,
        ],
        axis=-1,
    )


def _quadratic_system(points: np.ndarray, bearings: np.ndarray):
    """Assemble the reduced quadratic form over vectorized rotations.

    For each observation the residual operator is A = [[1,0,-x],[0,1,-y]]
    applied to the camera-frame point, giving the PSD form Q = A^T A. With
    row-major r = vec(R) and t eliminated at its optimum, the objective is
    r^T Omega r with Omega = sum Q_i (x) p_i p_i^T - B^T (sum Q)^-1 B.
    Returns (Omega (B,9,9), P (B,3,9)) with t* = P r.
    """
    p = np.asarray(points, dtype=np.float64)
    x, y = bearings[..., 0], bearings[..., 1]
    B, n = x.shape
    Q = np.empty((B, n, 3, 3))
    Q[..., 0, 0] = 1.0
    Q[..., 0, 1] = 0.0
    Q[..., 0, 2] = -x
    Q[..., 1, 0] = 0.0
    Q[..., 1, 1] = 1.0
    Q[..., 1, 2] = -y
    Q[..., 2, 0] = -x
    Q[..., 2, 1] = -y
    Q[..., 2, 2] = x * x + y * y

    ppT = p[..., :, None] * p[..., None, :]  # (B, n, 3, 3)
    omega0 = np.einsum("bnij,bnkl->bikjl", Q, ppT).reshape(B, 9, 9)
    bmat = np.einsum("bnij,bnd->bijd", Q, p).reshape(B, 3, 9)
    sq = Q.sum(axis=1)

    # guard against unconditioned translation elimination
    det = np.linalg.det(sq)
    bad = ~np.isfinite(det) | (np.abs(det) < 1e-18)
    if bad.any():
        sq = sq.copy()
        sq[bad] = np.eye(3)
    sq_inv = np.linalg.inv(sq)
    P = -sq_inv @ bmat
    omega = omega0 + np.swapaxes(bmat, 1, 2) @ P
    omega = 0.5 * (omega + np.swapaxes(omega, 1, 2))
    return omega, P, bad


def _constraints(r: np.ndarray):
    """Orthonormality residuals h (.., 6) and Jacobian H (.., 6, 9)."""
    r1, r2, r3 = r[..., 0:3], r[..., 3:6], r[..., 6:9]
    h = np.stack(
        [
            (r1 * r1).sum(-1) - 1.0,
            (r2 * r2).sum(-1) - 1.0,
            (r3 * r3).sum(-1) - 1.0,
            (r1 * r2).sum(-1),
            (r1 * r3).sum(-1),
            (r2 * r3).sum(-1),
        ],
        axis=-1,
    )
    H = np.zeros(r.shape[:-1] + (6, 9))
    H[..., 0, 0:3] = 2 * r1
    H[..., 1, 3:6] = 2 * r2
    H[..., 2, 6:9] = 2 * r3
    H[..., 3, 0:3] = r2
    H[..., 3, 3:6] = r1
    H[..., 4, 0:3] = r3
    H[..., 4, 6:9] = r1
    H[..., 5, 3:6] = r3
    H[..., 5, 6:9] = r2
    return h, H


def _solve_batch(mats: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """np.linalg.solve with a pseudo-inverse fallback for singular members."""
    sign, _ = np.linalg.slogdet(mats)
    ok = np.isfinite(sign) & (sign != 0)
    out = np.zeros_like(rhs)
    if ok.any():
        try:
            out[ok] = np.linalg.solve(mats[ok], rhs[ok][..., None])[..., 0]
        except np.linalg.LinAlgError:
            ok = np.zeros_like(ok)
    if (~ok).any():
        bad = np.where(np.isfinite(mats[~ok]), mats[~ok], 0.0)
        out[~ok] = np.einsum(
            "...ij,...j->...i",
            np.linalg.pinv(bad),
            np.where(np.isfinite(rhs[~ok]), rhs[~ok], 0.0),
        )
    return out


@np.errstate(invalid="ignore", over="ignore")
def _sqp_refine(r: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """SQP iterations on r^T Omega r subject to the rotation constraints.

    errstate: candidates heading nowhere may overflow before the finite-ness
    check culls them; that arithmetic is intentional, not an error.
    """
    M = len(r)
    active = np.ones(M, dtype=bool)
    for _ in range(SQP_MAX_ITERS):
        if not active.any():
            break
        ra, oa = r[active], omega[active]
        h, H = _constraints(ra)
        k = len(ra)
        kkt = np.zeros((k, 15, 15))
        kkt[:, :9, :9] = oa
        kkt[:, :9, 9:] = np.swapaxes(H, 1, 2)
        kkt[:, 9:, :9] = H
        rhs = np.concatenate(
            [-np.einsum("bij,bj->bi", oa, ra), -h], axis=1
        )
        delta = _solve_batch(kkt, rhs)[:, :9]
        r[active] = ra + delta
        still = np.linalg.norm(delta, axis=1) >= SQP_STEP_TOL
        still &= np.isfinite(r[active]).all(axis=1)  # drop diverged candidates
        idx = np.nonzero(active)[0]
        active[idx[~still]] = False
    return r


def _nearest_rotations(r: np.ndarray) -> np.ndarray:
    """Project (M, 9) row-major candidates onto SO(3).

    Diverged (non-finite) candidates become the identity; their reprojection
    error disqualifies them downstream.
    """
    r = np.where(np.isfinite(r).all(axis=1, keepdims=True), r, np.eye(3).ravel())
    R = r.reshape(-1, 3, 3)
    U, _, Vt = np.linalg.svd(R)
    det = np.linalg.det(U @ Vt)
    U = U.copy()
    U[:, :, 2] *= det[:, None]
    return U @ Vt


def _check_not_collinear(points: np.ndarray) -> None:
    p = points - points.mean(axis=0)
    s = np.linalg.svd(p, compute_uv=False)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateGeometryError("3D points are collinear (or coincident)")


def solve_pnp_batch(
    points: np.ndarray, pixels: np.ndarray, intrinsics: CameraIntrinsics
):
    """Best SQP solution per stacked problem.

    ``points``/``pixels`` are (B, n, 3) and (B, n, 2). Returns (R (B,3,3),
    t (B,3), mean squared pixel error (B,), valid (B,)); invalid members had
    no candidate passing the cheirality check.
    """
    points = np.asarray(points, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    B, n = points.shape[:2]
    bearings = _bearings(pixels, intrinsics)
    omega, P, degenerate = _quadratic_system(points, bearings)

    eigvals, eigvecs = np.linalg.eigh(omega)
    seeds = eigvecs[:, :, :3]  # (B, 9, 3) eigenvectors of 3 smallest eigenvalues
    cand = np.concatenate([seeds, -seeds], axis=2)  # (B, 9, 6)
    r = np.swapaxes(cand, 1, 2).reshape(B * 6, 9) * np.sqrt(3.0)

    omega6 = np.repeat(omega, 6, axis=0)
    r = _sqp_refine(r.copy(), omega6)
    R = _nearest_rotations(r)  # (B*6, 3, 3)
    rvec = R.reshape(B * 6, 9)
    t = np.einsum("bij,bj->bi", np.repeat(P, 6, axis=0), rvec)  # (B*6, 3)

    pts6 = np.repeat(points, 6, axis=0)  # (B*6, n, 3)
    cam = np.einsum("bij,bnj->bni", R, pts6) + t[:, None, :]
    z = cam[..., 2]
    ahead = (z > 1e-9).all(axis=1)
    zsafe = np.where(z > 1e-9, z, 1.0)
    u = intrinsics.fx * cam[..., 0] / zsafe + intrinsics.cx
    v = intrinsics.fy * cam[..., 1] / zsafe + intrinsics.cy
    pix6 = np.repeat(pixels, 6, axis=0)
    err = ((u - pix6[..., 0]) ** 2 + (v - pix6[..., 1]) ** 2).mean(axis=1)
    err = np.where(ahead, err, np.inf)

    err = err.reshape(B, 6)
    pick = err.argmin(axis=1)
    rows = np.arange(B)
    best_err = err[rows, pick]
    valid = np.isfinite(best_err) & ~degenerate
    Rb = R.reshape(B, 6, 3, 3)[rows, pick]
    tb = t.reshape(B, 6, 3)[rows, pick]
    return Rb, tb, best_err, valid


def sqpnp(
    points3d: np.ndarray, pixels: np.ndarray, intrinsics: CameraIntrinsics
) -> list[tuple[Pose, float]]:
    """All distinct SQP solutions, best (lowest mean squared pixel error) first."""
    points3d = np.asarray(points3d, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    if len(points3d) < 3:
        raise InsufficientDataError(f"PnP needs >= 3 points, got {len(points3d)}")
    _check_not_collinear(points3d)

    bearings = _bearings(pixels[None], intrinsics)
    omega, P, degenerate = _quadratic_system(points3d[None], bearings)
    if degenerate[0]:
        raise DegenerateGeometryError("translation elimination is singular")
    _, eigvecs = np.linalg.eigh(omega[0])
    r = np.concatenate([eigvecs[:, :3].T, -eigvecs[:, :3].T]) * np.sqrt(3.0)
    r = _sqp_refine(r.copy(), np.repeat(omega, 6, axis=0))
    R = _nearest_rotations(r)
    t = np.einsum("ij,bj->bi", P[0], R.reshape(6, 9))

    solutions: list[tuple[Pose, float]] = []
    for k in range(6):
        cam = points3d @ R[k].T + t[k]
        if (cam[:, 2] <= 1e-9).any():
            continue
        u = intrinsics.fx * cam[:, 0] / cam[:, 2] + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / cam[:, 2] + intrinsics.cy
        err = float(((u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2).mean())
        pose = Pose(R[k], t[k])
        if any(
            np.abs(R[k] - p.rotation).max() < 1e-6
            and np.abs(t[k] - p.translation).max() < 1e-6 * max(1.0, np.abs(t[k]).max())
            for p, _ in solutions
        ):
            continue
        solutions.append((pose, err))
    if not solutions:
        raise DegenerateGeometryError("no solution keeps all points in front")
    solutions.sort(key=lambda s: s[1])
    return solutions


# ---------------------------------------------------------------------------
# EPnP (ablation parity)


def _control_points(points: np.ndarray) -> np.ndarray:
    center = points.mean(axis=0)
    centered = points - center
    _, s, Vt = np.linalg.svd(centered, full_matrices=False)
    k = np.sqrt((s**2) / len(points))
    if s[2] > 1e-9 * s[0]:
        ctrl = [center] + [center + k[i] * Vt[i] for i in range(3)]
    else:  # planar: 3 control points spanning the plane
        ctrl = [center] + [center + k[i] * Vt[i] for i in range(2)]
    return np.asarray(ctrl)


def _barycentric(points: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    m = len(ctrl)
    A = np.vstack([ctrl.T, np.ones(m)])
    b = np.vstack([points.T, np.ones(len(points))])
    return np.linalg.lstsq(A, b, rcond=None)[0].T  # (n, m)


def epnp(
    points3d: np.ndarray, pixels: np.ndarray, intrinsics: CameraIntrinsics
) -> Pose:
    """Linear control-point solver with Gauss-Newton scale refinement."""
    points3d = np.asarray(points3d, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    n = len(points3d)
    if n < 4:
        raise InsufficientDataError(f"this solver needs >= 4 points, got {n}")
    _check_not_collinear(points3d)

    ctrl = _control_points(points3d)
    m = len(ctrl)
    alphas = _barycentric(points3d, ctrl)

    M = np.zeros((2 * n, 3 * m))
    fx, fy, cx, cy = intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy
    for i in range(n):
        u, v = pixels[i]
        for j in range(m):
            a = alphas[i, j]
            M[2 * i, 3 * j : 3 * j + 3] = [a * fx, 0.0, a * (cx - u)]
            M[2 * i + 1, 3 * j : 3 * j + 3] = [0.0, a * fy, a * (cy - v)]

    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    basis = Vt[-4:][::-1] if Vt.shape[0] >= 4 else Vt[::-1]  # ascending singular values

    dist_gt = np.linalg.norm(ctrl[:, None] - ctrl[None, :], axis=2)
    iu = np.triu_indices(m, k=1)

    def cam_points(beta):
        return (beta[:, None] * basis[: len(beta)]).sum(axis=0).reshape(m, 3)

    def gauss_newton(beta, iters=10):
        for _ in range(iters):
            pc = cam_points(beta)
            diff = pc[:, None] - pc[None, :]
            d = np.linalg.norm(diff, axis=2)
            res = d[iu] ** 2 - dist_gt[iu] ** 2
            J = np.zeros((len(iu[0]), len(beta)))
            for b in range(len(beta)):
                vb = basis[b].reshape(m, 3)
                dvb = vb[:, None] - vb[None, :]
                J[:, b] = 2 * (diff[iu] * dvb[iu]).sum(axis=1)
            step, *_ = np.linalg.lstsq(J, -res, rcond=None)
            beta = beta + step
        return beta

    candidates = []
    # case N=1: single basis vector, scale picked in closed form
    v1 = basis[0].reshape(m, 3)
    d1 = np.linalg.norm(v1[:, None] - v1[None, :], axis=2)[iu]
    denom = (d1**2).sum()
    if denom > 1e-18:
        candidates.append(np.array([(d1 * dist_gt[iu]).sum() / (d1**2).sum()]))
    # cases N=2 and N=3 start from least-squares over squared-distance terms
    for N in (2, 3):
        beta = np.full(N, 0.1)
        candidates.append(gauss_newton(beta))
    candidates = [gauss_newton(b) for b in candidates]

    best = None
    for beta in candidates:
        pc = cam_points(beta)
        if pc[:, 2].mean() < 0:  # cheirality: flip the homogeneous sign
            pc = -pc
        pose = _umeyama_rigid(ctrl, pc)
        cam = points3d @ pose.rotation.T + pose.translation
        if (cam[:, 2] <= 1e-9).any():
            continue
        u = fx * cam[:, 0] / cam[:, 2] + cx
        v = fy * cam[:, 1] / cam[:, 2] + cy
        err = float(((u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2).mean())
        if best is None or err < best[1]:
            best = (pose, err)
    if best is None:
        raise DegenerateGeometryError("no control-point solution is in front of the camera")
    return best[0]


def _umeyama_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform aligning src -> dst (least squares, no scaling)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose(R, mu_d - R @ mu_s)


# ---------------------------------------------------------------------------
# consensus wrapper


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 800
    reproj_px: float = 14.0
    sample_size: int = 6
    solver: str = "sqpnp"  # or "epnp"
    seed: int = 0
    weighted: bool = True
    early_stop_ratio: float = 0.9
    min_inliers: int = 4

    def __post_init__(self):
        if self.solver not in ("sqpnp", "epnp"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    inlier_indices: tuple[int, ...]
    mean_reprojection_error: float  # pixels, over inliers
    score: float  # inlier ratio in [0, 1]


def reprojection_errors(
    pose: Pose, points3d: np.ndarray, pixels: np.ndarray, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Pixel distances between projections and observations; inf behind camera."""
    cam = np.asarray(points3d, np.float64) @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    zsafe = np.where(z > 1e-9, z, 1.0)
    u = intrinsics.fx * cam[:, 0] / zsafe + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / zsafe + intrinsics.cy
    p = np.asarray(pixels, np.float64)
    err = np.hypot(u - p[:, 0], v - p[:, 1])
    return np.where(z > 1e-9, err, np.inf)


def _refit(points, pixels, intrinsics, solver):
    if solver == "sqpnp":
        return sqpnp(points, pixels, intrinsics)[0][0]
    return epnp(points, pixels, intrinsics)


def ransac_pnp(
    correspondences: Sequence,
    intrinsics: CameraIntrinsics,
    config: RansacConfig = RansacConfig(),
) -> PoseEstimate:
    """Confidence-weighted random sample consensus around the PnP solvers.

    Every iteration draws its own generator from (seed, iteration), so runs
    are reproducible bit-for-bit no matter how work is scheduled. The final
    inlier set is recomputed under the returned pose, making the estimate
    self-consistent.
    """
    n = len(correspondences)
    if n < config.min_inliers:
        raise InsufficientDataError(f"consensus needs >= 4 correspondences, got {n}")
    points = np.asarray([c.point3d_metric for c in correspondences], dtype=np.float64)
    pixels = np.asarray([c.pixel for c in correspondences], dtype=np.float64)
    conf = np.asarray([c.confidence for c in correspondences], dtype=np.float64)

    weights = None
    if config.weighted and conf.sum() > 0:
        weights = conf / conf.sum()
    k = min(config.sample_size, n)

    samples = np.empty((config.iterations, k), dtype=np.int64)
    for i in range(config.iterations):
        rng = np.random.default_rng([config.seed, i])
        samples[i] = rng.choice(n, size=k, replace=False, p=weights)

    if config.solver == "sqpnp":
        R, t, _, valid = solve_pnp_batch(points[samples], pixels[samples], intrinsics)
    else:
        R = np.tile(np.eye(3), (config.iterations, 1, 1))
        t = np.zeros((config.iterations, 3))
        valid = np.zeros(config.iterations, dtype=bool)
        for i, idx in enumerate(samples):
            try:
                pose = epnp(points[idx], pixels[idx], intrinsics)
            except (InsufficientDataError, DegenerateGeometryError):
                continue
            R[i], t[i], valid[i] = pose.rotation, pose.translation, True
            err_i = reprojection_errors(pose, points, pixels, intrinsics)
            if (err_i <= config.reproj_px).sum() >= config.early_stop_ratio * n:
                R, t, valid = R[: i + 1], t[: i + 1], valid[: i + 1]
                break

    cam = np.einsum("bij,nj->bni", R, points) + t[:, None, :]
    z = cam[..., 2]
    zsafe = np.where(z > 1e-9, z, 1.0)
    u = intrinsics.fx * cam[..., 0] / zsafe + intrinsics.cx
    v = intrinsics.fy * cam[..., 1] / zsafe + intrinsics.cy
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    err = np.where(z > 1e-9, err, np.inf)
    inlier_mask = err <= config.reproj_px
    counts = np.where(valid, inlier_mask.sum(axis=1), 0)
    sums = np.where(inlier_mask, err, 0.0).sum(axis=1)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)

    # honor sequential early termination: only iterations up to the first
    # hypothesis reaching the stop ratio compete
    stop = np.nonzero(counts >= config.early_stop_ratio * n)[0]
    last = stop[0] if len(stop) else len(counts) - 1
    counts, means = counts[: last + 1], means[: last + 1]

    best = int(np.lexsort((means, -counts))[0])
    if counts[best] < config.min_inliers:
        raise NoConsensusError(
            f"best hypothesis explains {counts[best]} of {n} correspondences"
        )

    pose = Pose(R[best], t[best])
    inliers = np.nonzero(inlier_mask[best])[0]
    try:
        refit = _refit(points[inliers], pixels[inliers], intrinsics, config.solver)
        refit_err = reprojection_errors(refit, points, pixels, intrinsics)
        refit_inliers = np.nonzero(refit_err <= config.reproj_px)[0]
        if len(refit_inliers) >= config.min_inliers:
            pose, inliers = refit, refit_inliers
    except (InsufficientDataError, DegenerateGeometryError):
        pass  # keep the raw hypothesis

    final_err = reprojection_errors(pose, points, pixels, intrinsics)
    inliers = np.nonzero(final_err <= config.reproj_px)[0]
    return PoseEstimate(
        pose=pose,
        inlier_indices=tuple(int(i) for i in inliers),
        mean_reprojection_error=float(final_err[inliers].mean()),
        score=len(inliers) / n,
    )
