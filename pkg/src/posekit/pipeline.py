"""End-to-end workflows: onboard, estimate, train, evaluate, diagnose.

Every handler here is a plain function over filesystem paths plus a knob
dataclass, returning a small report object. The HTTP service and the
command-line client are both thin wrappers around these, so batch runs and
service calls share one code path.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from .attention import decoder_forward, encoder_forward
from .errors import InsufficientDataError, NoConsensusError, ResultFormatError
from .features import downsample_nocs, load_descriptor_stack, oracle_backbone
from .geometry import CameraIntrinsics, ObjectModel, Pose, TriangleMesh, normalize_mesh
from .matching import (
    MatchConfig,
    bbox_from_mask,
    dump_correspondences_jsonl,
    gather_correspondences,
    make_crop,
    select_views,
    vote_primary_template,
)
from .meshio import load_mesh, load_symmetries
from .metrics import (
    ERROR_FRACTIONS,
    Detection,
    EstimateErrors,
    ResultRow,
    aggregate_ap,
    aggregate_ar,
    vsd_curve,
    e_mspd,
    e_mssd,
    read_results,
    write_results,
)
from .models import ModelConfig, PoseModel, load_checkpoint
from .pnp import RansacConfig, ransac_pnp
from .rendering import (
    TemplateSet,
    load_template_set,
    rasterize,
    render_template_set,
    save_template_set,
)
from .synth import load_scene
from .training import (
    LossConfig,
    TrainConfig,
    TrainingObject,
    train_loop,
)

BACKBONES = ("oracle", "toy", "imported")
# geometry-derived oracle descriptors have cosines compressed near 1 and need
# a much colder dual-softmax temperature than trained descriptors
DEFAULT_TEMPERATURE = {"oracle": 1e-4, "toy": 0.1, "imported": 0.1}


def thread_budget() -> int:
    """Worker cap from OPF_THREADS, falling back to the CPU count."""
    env = os.environ.get("OPF_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def apply_thread_budget() -> int:
    n = thread_budget()
    torch.set_num_threads(n)
    return n


@dataclass(frozen=True)
class PipelineConfig:
    """Estimation knobs; defaults follow the reference operating point."""

    backbone: str = "toy"  # oracle | toy | imported
    temperature: float | None = None  # None -> per-backbone default
    threshold: float = 0.2
    ransac_iterations: int = 800
    reproj_px: float = 14.0  # crop-scale pixels (one patch side at the crop)
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")

    def match_config(self) -> MatchConfig:
        t = self.temperature
        if t is None:
            t = DEFAULT_TEMPERATURE[self.backbone]
        return MatchConfig(temperature=t, threshold=self.threshold)

    def ransac_config(self, crop_scale: float = 1.0) -> RansacConfig:
        # reproj_px is stated in crop pixels, where the patch grid lives and
        # one patch spans 14 px regardless of how large the object projects in
        # the source image. Correspondence pixels are in source-image coords,
        # so the threshold converts by the crop's pixel scale.
        return RansacConfig(
            iterations=self.ransac_iterations,
            reproj_px=self.reproj_px * crop_scale,
            seed=self.seed,
        )


# ---------------------------------------------------------------------------
# onboarding


@dataclass(frozen=True)
class OnboardReport:
    object_id: str
    out_dir: str
    view_count: int
    resolution: int
    diameter: float
    seconds: float

    def as_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "out_dir": self.out_dir,
            "view_count": self.view_count,
            "resolution": self.resolution,
            "diameter": self.diameter,
            "seconds": self.seconds,
        }


def load_object_model(mesh_path: str | Path) -> ObjectModel:
    """Mesh file + optional symmetry sidecar -> normalized ObjectModel."""
    mesh = load_mesh(mesh_path)
    symmetries = load_symmetries(mesh_path)
    normalized, transform, diameter = normalize_mesh(mesh)
    # load_symmetries always puts the identity first; ObjectModel re-prepends
    return ObjectModel(normalized, transform, diameter, tuple(symmetries[1:]))


def onboard(
    mesh_path: str | Path,
    out_dir: str | Path,
    frequency: int = 2,
    resolution: int = 420,
    object_id: str | None = None,
) -> OnboardReport:
    """Render and persist the view-sphere template set for one mesh."""
    t0 = time.perf_counter()
    mesh_path = Path(mesh_path)
    if object_id is None:
        object_id = mesh_path.stem
    model = load_object_model(mesh_path)
    tset = render_template_set(model, frequency, resolution, object_id=object_id)
    save_template_set(tset, out_dir)
    return OnboardReport(
        object_id=object_id,
        out_dir=str(out_dir),
        view_count=len(tset.templates),
        resolution=resolution,
        diameter=model.diameter,
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# inputs


@dataclass(frozen=True)
class DetectionInput:
    bbox: tuple[float, float, float, float]  # (x0, y0, x1, y1) pixels
    score: float
    object_id: int


@dataclass(frozen=True)
class ImageInput:
    """One query image plus whatever ground-truth channels it carries."""

    key: str
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    intrinsics: CameraIntrinsics | None
    nocs: np.ndarray | None = None
    mask: np.ndarray | None = None
    depth: np.ndarray | None = None
    gt_pose: Pose | None = None


def intrinsics_from_matrix(K: np.ndarray, width: int, height: int) -> CameraIntrinsics:
    K = np.asarray(K, dtype=np.float64).reshape(3, 3)
    return CameraIntrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], width, height)


def load_image_input(path: str | Path, K: np.ndarray | None = None) -> ImageInput:
    """Load a query: a synthetic scene archive (.npz) or a plain image file.

    Plain images need intrinsics supplied separately (``K``); scene archives
    carry their own plus NOCS/mask/depth and, when present, the true pose.
    """
    path = Path(path)
    key = path.stem
    if path.suffix == ".npz":
        scene = load_scene(path)
        intr = intrinsics_from_matrix(
            scene["K"], int(scene["width"]), int(scene["height"])
        )
        gt = None
        if "R" in scene:
            gt = Pose(np.asarray(scene["R"]), np.asarray(scene["t"]))
        return ImageInput(
            key=key,
            rgb=scene["rgb"].astype(np.float32) / 255.0,
            intrinsics=intr,
            nocs=scene.get("nocs"),
            mask=scene.get("mask"),
            depth=scene.get("depth"),
            gt_pose=gt,
        )
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"unreadable image {path}")
    rgb = bgr[:, :, ::-1].astype(np.float32) / 255.0
    intr = None
    if K is not None:
        intr = intrinsics_from_matrix(K, rgb.shape[1], rgb.shape[0])
    return ImageInput(key=key, rgb=rgb, intrinsics=intr)


def read_detections(path: str | Path) -> dict[str, dict]:
    """Parse the detections file: {image key: {detections: [...], K?: [9]}}.

    Each detection is {"bbox": [x0, y0, x1, y1], "score": float,
    "object_id": int}. A bare list is accepted as shorthand for
    {"detections": [...]}.
    """
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ResultFormatError(f"cannot read detections {path}: {e}") from e
    if not isinstance(data, dict):
        raise ResultFormatError("detections file must be a JSON object keyed by image")
    out = {}
    for key, entry in data.items():
        if isinstance(entry, list):
            entry = {"detections": entry}
        dets = [
            DetectionInput(
                bbox=tuple(float(v) for v in d["bbox"]),
                score=float(d.get("score", 1.0)),
                object_id=int(d.get("object_id", 0)),
            )
            for d in entry.get("detections", [])
        ]
        out[key] = {"detections": dets, "K": entry.get("K")}
    return out


# ---------------------------------------------------------------------------
# estimation


@dataclass(frozen=True)
class EstimateOutcome:
    image_key: str
    object_id: int
    pose: Pose  # camera-from-object, meters
    score: float  # RANSAC inlier ratio; -1.0 on a flagged fallback row
    inlier_count: int
    mean_reprojection_error: float
    n_correspondences: int
    flagged: bool
    timings: dict[str, float]
    seconds: float

    def as_dict(self) -> dict:
        return {
            "image": self.image_key,
            "object_id": self.object_id,
            "rotation": self.pose.rotation.reshape(-1).tolist(),
            "translation_m": self.pose.translation.tolist(),
            "score": self.score,
            "inlier_count": self.inlier_count,
            "mean_reprojection_error_px": (
                self.mean_reprojection_error
                if math.isfinite(self.mean_reprojection_error)
                else None
            ),
            "n_correspondences": self.n_correspondences,
            "flagged": self.flagged,
            "timings": self.timings,
            "seconds": self.seconds,
        }


@dataclass(frozen=True)
class PreparedTemplates:
    """Per-template-set state reused across queries."""

    template_set: TemplateSet
    mode: str
    model: PoseModel | None
    # oracle mode: geometry tokens; trained modes: encoder memory
    oracle_tokens: torch.Tensor | None = None
    encoded: object | None = None  # TokenSequence
    origin: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))


def _default_model(backbone: str, seed: int) -> PoseModel:
    if backbone == "imported":
        cfg = ModelConfig(stack_layers=24, stack_channels=1024, with_backbone=False)
    else:
        cfg = ModelConfig()
    return PoseModel.seeded(cfg, seed=seed)


def _template_stack(mode, model, template, index, features_dir):
    if mode == "toy":
        return model.backbone(torch.as_tensor(template.rgb, dtype=torch.float32))
    path = Path(features_dir) / f"rgb_{index:03d}.pdsk"
    if not path.exists():
        raise InsufficientDataError(
            f"imported backbone needs exported template features at {path}"
        )
    return load_descriptor_stack(path)


def prepare_templates(
    tset: TemplateSet,
    config: PipelineConfig,
    model: PoseModel | None = None,
    features_dir: str | Path | None = None,
) -> PreparedTemplates:
    """Precompute the template-side tokens once per template set."""
    if config.backbone == "oracle":
        toks, origin = [], []
        for i, t in enumerate(tset.templates):
            grid = oracle_backbone(t.nocs, t.mask)
            _, patch_mask = downsample_nocs(t.nocs, t.mask)
            rows, cols = np.nonzero(patch_mask)
            toks.append(grid.data[rows, cols])
            origin.append(np.stack([np.full(len(rows), i), rows, cols], axis=1))
        return PreparedTemplates(
            template_set=tset,
            mode="oracle",
            model=None,
            oracle_tokens=torch.cat(toks),
            origin=np.concatenate(origin).astype(np.int64),
        )

    if model is None:
        model = _default_model(config.backbone, config.seed)
    if config.backbone == "toy" and model.backbone is None:
        raise InsufficientDataError("checkpoint has no backbone; use --backbone imported")
    grids, nocs_grids = [], []
    with torch.no_grad():
        for i, t in enumerate(tset.templates):
            stack = _template_stack(config.backbone, model, t, i, features_dir)
            grids.append(model.adapter(stack))
            nocs_grids.append(downsample_nocs(t.nocs, t.mask))
        encoded = encoder_forward(grids, nocs_grids, model.encoder)
    return PreparedTemplates(
        template_set=tset,
        mode=config.backbone,
        model=model,
        encoded=encoded,
        origin=encoded.origin,
    )


def _interior_patches(mask_crop: np.ndarray) -> np.ndarray:
    """Flat boolean index of patches whose 14x14 footprint is all foreground."""
    Hp, Wp = mask_crop.shape[0] // 14, mask_crop.shape[1] // 14
    return (
        mask_crop.reshape(Hp, 14, Wp, 14)
        .transpose(0, 2, 1, 3)
        .reshape(Hp * Wp, -1)
        .all(axis=1)
    )


def _query_retained(inp, bbox, prepared, config, features_dir):
    """Crop the query and produce per-layer (image, template) token pairs.

    Returns (retained dict, grid shape, crop transform, crop rgb). Oracle mode
    matches geometry descriptors directly on a single final layer; trained
    modes run the full decoder against the encoder memory.
    """
    tset = prepared.template_set
    res = tset.resolution
    rgb_crop, tf = make_crop(inp.rgb, bbox, res)

    if prepared.mode == "oracle":
        if inp.nocs is None or inp.mask is None:
            raise InsufficientDataError(
                "oracle backbone needs a scene archive with NOCS and mask"
            )
        nocs_crop, _ = make_crop(inp.nocs, bbox, res, nearest=True)
        mask_crop, _ = make_crop(inp.mask, bbox, res, nearest=True)
        grid = oracle_backbone(nocs_crop, mask_crop)
        Hp, Wp, d = grid.data.shape
        img_tokens = grid.data.reshape(Hp * Wp, d)
        retained = {4: (img_tokens, prepared.oracle_tokens)}
        vote_tokens = img_tokens[torch.from_numpy(_interior_patches(mask_crop))]
        return retained, (Hp, Wp), tf, rgb_crop, vote_tokens

    model = prepared.model
    with torch.no_grad():
        if prepared.mode == "toy":
            stack = model.backbone(torch.as_tensor(rgb_crop, dtype=torch.float32))
        else:
            path = Path(features_dir or ".") / f"{inp.key}.pdsk"
            if not path.exists():
                raise InsufficientDataError(
                    f"imported backbone needs exported features at {path}"
                )
            stack = load_descriptor_stack(path)
        img_grid = model.adapter(stack)
        decoded = decoder_forward(img_grid, prepared.encoded, model.decoder)
    retained = decoded.retained()
    Hp, Wp, _ = img_grid.data.shape
    return retained, (Hp, Wp), tf, rgb_crop, retained[4][0]


def estimate_detection(
    inp: ImageInput,
    det: DetectionInput,
    prepared: PreparedTemplates,
    config: PipelineConfig,
    features_dir: str | Path | None = None,
) -> EstimateOutcome:
    """Full single-detection pipeline: crop, match, vote, solve.

    A failed consensus (or too few correspondences) does not raise: it yields
    a flagged identity-pose outcome with score -1, mirroring the batch
    fallback behavior expected of result tables.
    """
    if inp.intrinsics is None:
        raise ResultFormatError(
            f"image {inp.key} has no intrinsics; supply K in the detections file"
        )
    t0 = time.perf_counter()
    timings = {}

    tick = time.perf_counter()
    retained, grid_shape, tf, _, vote_tokens = _query_retained(
        inp, det.bbox, prepared, config, features_dir
    )
    timings["features"] = time.perf_counter() - tick

    flagged_reason = None
    corrs = ()
    n_inliers = 0
    mean_err = float("nan")
    pose = Pose.identity()
    score = -1.0
    tset = prepared.template_set

    tick = time.perf_counter()
    try:
        primary = vote_primary_template(
            vote_tokens, _match_tokens(retained), prepared.origin
        )
        selected = select_views(primary, tset.graph)
        corrs = gather_correspondences(
            retained, prepared.origin, grid_shape, selected, tf, tset,
            config.match_config(),
        )
    except InsufficientDataError as e:
        flagged_reason = str(e)
    timings["match"] = time.perf_counter() - tick

    tick = time.perf_counter()
    if flagged_reason is None:
        try:
            est = ransac_pnp(corrs, inp.intrinsics, config.ransac_config(tf.scale))
            pose = est.pose
            score = est.score
            n_inliers = len(est.inlier_indices)
            mean_err = est.mean_reprojection_error
        except (NoConsensusError, InsufficientDataError) as e:
            flagged_reason = str(e)
    timings["solve"] = time.perf_counter() - tick

    if flagged_reason is not None:
        warnings.warn(f"{inp.key}: falling back to flagged identity pose ({flagged_reason})")
        pose, score, n_inliers, mean_err = Pose.identity(), -1.0, 0, float("nan")

    return EstimateOutcome(
        image_key=inp.key,
        object_id=det.object_id,
        pose=pose,
        score=score,
        inlier_count=n_inliers,
        mean_reprojection_error=mean_err,
        n_correspondences=len(corrs),
        flagged=flagged_reason is not None,
        timings=timings,
        seconds=time.perf_counter() - t0,
    )


def _match_tokens(retained: dict) -> torch.Tensor:
    """Template-side tokens of the last retained layer (the voting space)."""
    return retained[max(retained)][1]


def _im_id(key: str, index: int) -> int:
    return int(key) if key.isdigit() else index


def estimate_batch(
    image_paths: Sequence[str | Path],
    detections_path: str | Path,
    template_dir: str | Path,
    config: PipelineConfig = PipelineConfig(),
    checkpoint: str | Path | None = None,
    features_dir: str | Path | None = None,
    out_csv: str | Path | None = None,
    out_json: str | Path | None = None,
    scene_id: int = 0,
) -> list[EstimateOutcome]:
    """Estimate every detection of every image; results follow input order.

    Images run in parallel up to the OPF_THREADS budget. The CSV/JSON outputs
    are written in input order, so identical inputs and seed give identical
    bytes regardless of scheduling.
    """
    apply_thread_budget()
    tset = load_template_set(template_dir)
    detections = read_detections(detections_path)
    model = None
    if checkpoint is not None:
        model, _, _ = load_checkpoint(checkpoint)
    prepared = prepare_templates(tset, config, model, features_dir)

    def run_one(path):
        path = Path(path)
        entry = detections.get(path.stem, {"detections": [], "K": None})
        inp = load_image_input(path, K=entry.get("K"))
        return [
            estimate_detection(inp, det, prepared, config, features_dir)
            for det in entry["detections"]
        ]

    workers = min(thread_budget(), max(1, len(image_paths)))
    if workers > 1 and len(image_paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(run_one, image_paths))
    else:
        per_image = [run_one(p) for p in image_paths]

    outcomes = [o for group in per_image for o in group]
    if out_csv is not None:
        rows = []
        for i, (path, group) in enumerate(zip(image_paths, per_image)):
            for o in group:
                rows.append(
                    ResultRow(
                        scene_id=scene_id,
                        im_id=_im_id(Path(path).stem, i),
                        obj_id=o.object_id,
                        score=o.score,
                        pose=o.pose,
                        # wall time would break byte-reproducibility; BOP's
                        # "unavailable" marker keeps output a pure function
                        # of inputs + seed
                        time_s=-1.0,
                    )
                )
        write_results(out_csv, rows)
    if out_json is not None:
        Path(out_json).write_text(json.dumps(stable_outcome_dicts(outcomes), indent=1))
    return outcomes


def stable_outcome_dicts(outcomes: Sequence[EstimateOutcome]) -> list[dict]:
    """Outcome dicts without wall-clock fields, byte-stable across runs."""
    dicts = []
    for o in outcomes:
        d = o.as_dict()
        d.pop("timings")
        d.pop("seconds")
        dicts.append(d)
    return dicts


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainReport:
    steps: int
    start_step: int
    first_loss: float
    final_loss: float
    smoothed_drop: float  # fractional drop of the smoothed total loss
    checkpoint: str | None
    log: str | None
    seconds: float

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "start_step": self.start_step,
            "first_loss": self.first_loss,
            "final_loss": self.final_loss,
            "smoothed_drop": self.smoothed_drop,
            "checkpoint": self.checkpoint,
            "log": self.log,
            "seconds": self.seconds,
        }


def _train_config_from(data: dict) -> TrainConfig:
    loss = LossConfig(**data.get("loss", {}))
    keys = (
        "steps", "peak_lr", "warmup_steps", "floor_lr", "weight_decay",
        "grad_clip", "templates_per_step", "checkpoint_every", "seed",
    )
    kw = {k: data[k] for k in keys if k in data}
    return TrainConfig(loss=loss, **kw)


def run_training(config_path: str | Path) -> TrainReport:
    """Train per a JSON config: objects, model dims, schedule, output paths.

    Config schema::

        {"objects": [{"mesh": "path.ply", "object_id": "name"}],
         "frequency": 1, "resolution": 420,
         "model": {"dim": 96, ...},            # ModelConfig fields
         "train": {"steps": 500, "loss": {...}, ...},  # TrainConfig fields
         "checkpoint": "out.opfw", "log": "loss.csv",
         "resume": "optional-previous.opfw"}
    """
    t0 = time.perf_counter()
    apply_thread_budget()
    try:
        data = json.loads(Path(config_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ResultFormatError(f"cannot read train config {config_path}: {e}") from e
    if not data.get("objects"):
        raise ResultFormatError("train config lists no objects")

    frequency = int(data.get("frequency", 1))
    resolution = int(data.get("resolution", 420))
    objects = []
    for entry in data["objects"]:
        model_obj = load_object_model(entry["mesh"])
        tset = render_template_set(
            model_obj, frequency, resolution,
            object_id=entry.get("object_id", Path(entry["mesh"]).stem),
        )
        objects.append(TrainingObject(model_obj, tset))

    train_cfg = _train_config_from(data.get("train", {}))
    start_step = 0
    if data.get("resume"):
        model, meta, _ = load_checkpoint(data["resume"])
        start_step = int(meta.get("step", 0))
    else:
        model_cfg = ModelConfig(**data.get("model", {}))
        model = PoseModel.seeded(model_cfg, seed=train_cfg.seed)

    history = train_loop(
        objects,
        model,
        train_cfg,
        log_path=data.get("log"),
        checkpoint_path=data.get("checkpoint"),
        start_step=start_step,
    )
    smoothed = history.smoothed()
    drop = 1.0 - smoothed[-1] / smoothed[0] if smoothed[0] > 0 else 0.0
    return TrainReport(
        steps=train_cfg.steps,
        start_step=start_step,
        first_loss=float(history.total[0]),
        final_loss=float(history.total[-1]),
        smoothed_drop=float(drop),
        checkpoint=data.get("checkpoint"),
        log=data.get("log"),
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    per_object: dict[int, dict]
    mean_ar: float
    mean_ap: float
    n_estimates: int
    n_flagged: int

    def as_dict(self) -> dict:
        return {
            "per_object": {str(k): v for k, v in self.per_object.items()},
            "mean_AR": self.mean_ar,
            "mean_AP": self.mean_ap,
            "n_estimates": self.n_estimates,
            "n_flagged": self.n_flagged,
        }

    def table(self) -> str:
        lines = [
            f"{'object':>8} {'AR_VSD':>8} {'AR_MSSD':>8} {'AR_MSPD':>8} "
            f"{'AR':>8} {'AP_MSSD':>8} {'AP_MSPD':>8} {'AP':>8}"
        ]
        for obj_id in sorted(self.per_object):
            r = self.per_object[obj_id]
            lines.append(
                f"{obj_id:>8} {r['AR_VSD']:>8.4f} {r['AR_MSSD']:>8.4f} "
                f"{r['AR_MSPD']:>8.4f} {r['AR']:>8.4f} {r['AP_MSSD']:>8.4f} "
                f"{r['AP_MSPD']:>8.4f} {r['AP']:>8.4f}"
            )
        lines.append(f"mean AR {self.mean_ar:.4f}   mean AP {self.mean_ap:.4f}")
        return "\n".join(lines)


def _load_gt(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
        images = {}
        for scene in data["scenes"]:
            sid = int(scene["scene_id"])
            for im in scene["images"]:
                entry = {
                    "K": np.asarray(im["K"], dtype=np.float64).reshape(3, 3),
                    "width": int(im["width"]),
                    "height": int(im["height"]),
                    "depth": im.get("depth"),
                    "gts": [
                        {
                            "obj_id": int(g["obj_id"]),
                            "pose": Pose(
                                np.asarray(g["R"], dtype=np.float64).reshape(3, 3),
                                np.asarray(g["t_mm"], dtype=np.float64) / 1000.0,
                            ),
                        }
                        for g in im["gts"]
                    ],
                }
                images[(sid, int(im["im_id"]))] = entry
        return images
    except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
        raise ResultFormatError(f"malformed ground-truth file {path}: {e}") from e


def _metric_mesh(model: ObjectModel) -> TriangleMesh:
    inv = model.normalization.inverse()
    return TriangleMesh(
        inv.apply(model.mesh.vertices), model.mesh.faces, model.mesh.vertex_colors
    )


def evaluate(
    results_csv: str | Path,
    gt_json: str | Path,
    models_dir: str | Path,
    out_json: str | Path | None = None,
) -> EvalReport:
    """Score a result table against ground truth: per-object and mean AR/AP.

    Flagged rows (score < 0) count as failed estimates for recall but are not
    ranked as detections for precision. Rows with no matching ground truth
    are precision false positives and are excluded from recall.
    """
    rows = read_results(results_csv)
    gt_images = _load_gt(gt_json)
    models: dict[int, ObjectModel] = {}
    depth_cache: dict[str, np.ndarray] = {}

    def object_model(obj_id: int) -> ObjectModel:
        if obj_id not in models:
            path = Path(models_dir) / f"obj_{obj_id}.ply"
            if not path.exists():
                raise ResultFormatError(f"no model file {path}")
            models[obj_id] = load_object_model(path)
        return models[obj_id]

    def scene_depth(entry, model, intr) -> np.ndarray:
        if entry["depth"]:
            key = str(entry["depth"])
            if key not in depth_cache:
                depth_cache[key] = np.asarray(load_scene(key)["depth"], dtype=np.float64)
            return depth_cache[key]
        # no measured depth: the ground-truth render stands in for the scene
        gt0 = entry["gts"][0]["pose"]
        return rasterize(
            _metric_mesh(model), gt0, intr, nocs_transform=model.normalization
        ).depth

    per_object_errors: dict[int, list[EstimateErrors]] = {}
    detections: list[Detection] = []
    gt_counts: dict[tuple[int, int], int] = {}
    n_flagged = 0

    for key, entry in gt_images.items():
        image_id = (key[0] << 20) | key[1]
        for g in entry["gts"]:
            k = (image_id, g["obj_id"])
            gt_counts[k] = gt_counts.get(k, 0) + 1

    for row in rows:
        key = (row.scene_id, row.im_id)
        entry = gt_images.get(key)
        gt = None
        if entry is not None:
            gt = next((g for g in entry["gts"] if g["obj_id"] == row.obj_id), None)
        model = object_model(row.obj_id)
        image_id = (row.scene_id << 20) | row.im_id

        if gt is None:
            # no target: a detection-level false positive, nothing to recall
            detections.append(
                Detection(
                    image_id=image_id, object_id=row.obj_id, score=row.score,
                    mssd=float("inf"), mspd=float("inf"),
                    diameter=model.diameter, image_width=640,
                )
            )
            continue

        intr = intrinsics_from_matrix(entry["K"], entry["width"], entry["height"])
        if row.score < 0:
            n_flagged += 1
            errs = EstimateErrors(
                mssd=float("inf"), mspd=float("inf"),
                vsd=tuple(1.0 for _ in ERROR_FRACTIONS),
                diameter=model.diameter, image_width=entry["width"],
            )
        else:
            depth = scene_depth(entry, model, intr)
            mssd = e_mssd(row.pose, gt["pose"], model)
            mspd = e_mspd(row.pose, gt["pose"], model, intr)
            vsd = vsd_curve(
                row.pose, gt["pose"], model, intr, depth,
                taus=[f * model.diameter for f in ERROR_FRACTIONS],
            )
            errs = EstimateErrors(
                mssd=mssd, mspd=mspd, vsd=vsd,
                diameter=model.diameter, image_width=entry["width"],
            )
            detections.append(
                Detection(
                    image_id=image_id, object_id=row.obj_id, score=row.score,
                    mssd=mssd, mspd=mspd,
                    diameter=model.diameter, image_width=entry["width"],
                )
            )
        per_object_errors.setdefault(row.obj_id, []).append(errs)

    if not per_object_errors:
        raise InsufficientDataError("no estimates matched any ground truth")

    per_object = {}
    for obj_id, errors in sorted(per_object_errors.items()):
        ar = aggregate_ar(errors)
        obj_dets = [d for d in detections if d.object_id == obj_id]
        obj_counts = {k: v for k, v in gt_counts.items() if k[1] == obj_id}
        ap = aggregate_ap(obj_dets, obj_counts)
        per_object[obj_id] = {**ar.as_dict(), **ap.as_dict(), "n": len(errors)}
        per_object[obj_id].pop("recalls")

    mean_ar = float(np.mean([v["AR"] for v in per_object.values()]))
    mean_ap = float(np.mean([v["AP"] for v in per_object.values()]))
    report = EvalReport(
        per_object=per_object,
        mean_ar=mean_ar,
        mean_ap=mean_ap,
        n_estimates=len(rows),
        n_flagged=n_flagged,
    )
    if out_json is not None:
        Path(out_json).write_text(json.dumps(report.as_dict(), indent=1))
    return report


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class DiagnoseReport:
    out_dir: str
    primary_template: int
    n_correspondences: int
    vote_counts: list[int]
    files: list[str]

    def as_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "primary_template": self.primary_template,
            "n_correspondences": self.n_correspondences,
            "vote_counts": self.vote_counts,
            "files": self.files,
        }


def _confidence_color(conf: float) -> tuple[int, int, int]:
    """Map [0,1] confidence to a BGR blue->red ramp."""
    c = float(np.clip(conf, 0.0, 1.0))
    return (int(255 * (1 - c)), 64, int(255 * c))


def _vote_histogram_png(path: Path, counts: np.ndarray) -> None:
    H, W = 240, max(320, 4 * len(counts))
    img = np.full((H, W, 3), 255, np.uint8)
    peak = max(int(counts.max()), 1)
    bar_w = W // max(len(counts), 1)
    for i, c in enumerate(counts):
        h = int((H - 20) * c / peak)
        color = (32, 32, 200) if c == counts.max() else (180, 120, 40)
        cv2.rectangle(
            img, (i * bar_w + 1, H - 10 - h), ((i + 1) * bar_w - 1, H - 10), color, -1
        )
    cv2.imwrite(str(path), img)


def diagnose(
    image_path: str | Path,
    template_dir: str | Path,
    config: PipelineConfig = PipelineConfig(),
    checkpoint: str | Path | None = None,
    features_dir: str | Path | None = None,
    out_dir: str | Path = "diagnostics",
) -> DiagnoseReport:
    """Dump matching internals for one query: votes, overlays, heat maps.

    Writes votes.png/votes.json, overlay.png (matched patch centers on the
    crop, colored by confidence), heat_layer<L>.png per retained layer, and
    correspondences.jsonl. With no surviving correspondences a stub overlay is
    written and a warning raised; the report still carries the vote result.
    """
    apply_thread_budget()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tset = load_template_set(template_dir)
    model = None
    if checkpoint is not None:
        model, _, _ = load_checkpoint(checkpoint)
    prepared = prepare_templates(tset, config, model, features_dir)

    inp = load_image_input(image_path)
    if inp.mask is not None and inp.mask.any():
        bbox = bbox_from_mask(inp.mask)
    else:
        bbox = (0.0, 0.0, float(inp.rgb.shape[1]), float(inp.rgb.shape[0]))
    retained, grid_shape, tf, rgb_crop, vote_tokens = _query_retained(
        inp, bbox, prepared, config, features_dir
    )

    order = np.lexsort(
        (prepared.origin[:, 2], prepared.origin[:, 1], prepared.origin[:, 0])
    )
    with torch.no_grad():
        tmpl = _match_tokens(retained)[torch.as_tensor(order)]
        sims = torch.nn.functional.normalize(vote_tokens, dim=-1) @ \
            torch.nn.functional.normalize(tmpl, dim=-1).T
        best = sims.argmax(dim=1).numpy()
    winners = prepared.origin[order][best, 0]
    counts = np.bincount(winners, minlength=len(tset.templates))
    primary = int(counts.argmax())

    files = []
    _vote_histogram_png(out_dir / "votes.png", counts)
    (out_dir / "votes.json").write_text(
        json.dumps({"primary": primary, "counts": counts.tolist()})
    )
    files += ["votes.png", "votes.json"]

    selected = select_views(primary, tset.graph)
    try:
        corrs = gather_correspondences(
            retained, prepared.origin, grid_shape, selected, tf, tset,
            config.match_config(),
        )
    except InsufficientDataError as e:
        warnings.warn(f"no correspondences to plot: {e}")
        corrs = ()

    dump_correspondences_jsonl(corrs, out_dir / "correspondences.jsonl")
    files.append("correspondences.jsonl")

    overlay = np.ascontiguousarray((rgb_crop[:, :, ::-1] * 255).astype(np.uint8))
    if corrs:
        for c in corrs:
            u, v = (np.asarray(c.pixel) - tf.offset) / tf.scale
            cv2.circle(overlay, (int(u), int(v)), 4, _confidence_color(c.confidence), -1)
    else:
        cv2.putText(
            overlay, "no correspondences", (10, overlay.shape[0] // 2),
            cv2.FONT_HERSHEY_SIMPLEX, 0.8, (0, 0, 255), 2,
        )
    cv2.imwrite(str(out_dir / "overlay.png"), overlay)
    files.append("overlay.png")

    Hp, Wp = grid_shape
    for layer in sorted(retained):
        heat = np.zeros((Hp, Wp), np.float64)
        for c in corrs:
            if c.decoder_layer != layer:
                continue
            u, v = (np.asarray(c.pixel) - tf.offset) / tf.scale
            r, col = min(int(v) // 14, Hp - 1), min(int(u) // 14, Wp - 1)
            heat[r, col] = max(heat[r, col], c.confidence)
        heat8 = (np.clip(heat, 0, 1) * 255).astype(np.uint8)
        heat8 = cv2.resize(heat8, (Wp * 14, Hp * 14), interpolation=cv2.INTER_NEAREST)
        cv2.imwrite(
            str(out_dir / f"heat_layer{layer}.png"),
            cv2.applyColorMap(heat8, cv2.COLORMAP_VIRIDIS),
        )
        files.append(f"heat_layer{layer}.png")

    return DiagnoseReport(
        out_dir=str(out_dir),
        primary_template=primary,
        n_correspondences=len(corrs),
        vote_counts=counts.tolist(),
        files=files,
    )
