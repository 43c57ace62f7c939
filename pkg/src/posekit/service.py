"""HTTP front-end for the pipeline handlers.

Run with `posekit serve` (or `uvicorn posekit.service:app`). Each endpoint is
a thin wrapper over the matching function in `pipeline`; paths in requests
refer to the server's filesystem, which is the intended single-workstation
deployment: onboard once, keep the process alive, estimate many times.
"""

from __future__ import annotations

from typing import Literal, Optional

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import __version__, pipeline
from .errors import (
    CheckpointFormatError,
    MeshFormatError,
    PosekitError,
    ResultFormatError,
)

app = FastAPI(title="posekit service", version=__version__)


# ---------------------------------------------------------------------------
# schemas


class HealthResponse(BaseModel):
    status: str
    version: str
    threads: int


class OnboardRequest(BaseModel):
    mesh_path: str
    out_dir: str
    frequency: int = 2
    resolution: int = 420
    object_id: Optional[str] = None


class OnboardResponse(BaseModel):
    object_id: str
    out_dir: str
    view_count: int
    resolution: int
    diameter: float
    seconds: float


class PipelineKnobs(BaseModel):
    """Estimation knobs shared by the estimate and diagnose endpoints."""

    backbone: Literal["oracle", "toy", "imported"] = "toy"
    temperature: Optional[float] = None
    threshold: float = 0.2
    ransac_iterations: int = 800
    reproj_px: float = 14.0
    seed: int = 0

    def to_config(self) -> pipeline.PipelineConfig:
        return pipeline.PipelineConfig(
            backbone=self.backbone,
            temperature=self.temperature,
            threshold=self.threshold,
            ransac_iterations=self.ransac_iterations,
            reproj_px=self.reproj_px,
            seed=self.seed,
        )


class EstimateRequest(PipelineKnobs):
    images: list[str]
    detections: str
    templates: str
    checkpoint: Optional[str] = None
    features_dir: Optional[str] = None
    out_csv: Optional[str] = None
    out_json: Optional[str] = None
    scene_id: int = 0


class EstimateOutcomeModel(BaseModel):
    image: str
    object_id: int
    rotation: list[float]
    translation_m: list[float]
    score: float
    inlier_count: int
    mean_reprojection_error_px: Optional[float]
    n_correspondences: int
    flagged: bool
    timings: dict[str, float]
    seconds: float


class EstimateResponse(BaseModel):
    outcomes: list[EstimateOutcomeModel]
    out_csv: Optional[str]
    out_json: Optional[str]


class TrainRequest(BaseModel):
    config: str


class TrainResponse(BaseModel):
    steps: int
    start_step: int
    first_loss: float
    final_loss: float
    smoothed_drop: float
    checkpoint: Optional[str]
    log: Optional[str]
    seconds: float


class EvalRequest(BaseModel):
    results: str
    gt: str
    models_dir: str
    out_json: Optional[str] = None


class EvalResponse(BaseModel):
    per_object: dict[str, dict[str, float]]
    mean_AR: float
    mean_AP: float
    n_estimates: int
    n_flagged: int
    table: str


class DiagnoseRequest(PipelineKnobs):
    image: str
    templates: str
    checkpoint: Optional[str] = None
    features_dir: Optional[str] = None
    out_dir: str = "diagnostics"


class DiagnoseResponse(BaseModel):
    out_dir: str
    primary_template: int
    n_correspondences: int
    vote_counts: list[int]
    files: list[str]


# ---------------------------------------------------------------------------
# error mapping: malformed inputs -> 400, pipeline failures -> 500

_CLIENT_ERRORS = (MeshFormatError, CheckpointFormatError, ResultFormatError)


@app.exception_handler(PosekitError)
def posekit_error_handler(request, exc: PosekitError):
    status = 400 if isinstance(exc, _CLIENT_ERRORS) else 500
    return JSONResponse(
        status_code=status,
        content={"detail": str(exc), "error": type(exc).__name__},
    )


@app.exception_handler(FileNotFoundError)
def missing_file_handler(request, exc: FileNotFoundError):
    return JSONResponse(
        status_code=400,
        content={"detail": str(exc), "error": "FileNotFoundError"},
    )


# ---------------------------------------------------------------------------
# endpoints


@app.get("/health", response_model=HealthResponse)
def health():
    return {
        "status": "ok",
        "version": __version__,
        "threads": pipeline.thread_budget(),
    }


@app.post("/onboard", response_model=OnboardResponse)
def onboard(req: OnboardRequest):
    report = pipeline.onboard(
        req.mesh_path,
        req.out_dir,
        frequency=req.frequency,
        resolution=req.resolution,
        object_id=req.object_id,
    )
    return report.as_dict()


@app.post("/estimate", response_model=EstimateResponse)
def estimate(req: EstimateRequest):
    outcomes = pipeline.estimate_batch(
        req.images,
        req.detections,
        req.templates,
        config=req.to_config(),
        checkpoint=req.checkpoint,
        features_dir=req.features_dir,
        out_csv=req.out_csv,
        out_json=req.out_json,
        scene_id=req.scene_id,
    )
    return {
        "outcomes": [o.as_dict() for o in outcomes],
        "out_csv": req.out_csv,
        "out_json": req.out_json,
    }


@app.post("/train", response_model=TrainResponse)
def train(req: TrainRequest):
    report = pipeline.run_training(req.config)
    return report.as_dict()


@app.post("/evaluate", response_model=EvalResponse)
def evaluate(req: EvalRequest):
    report = pipeline.evaluate(
        req.results, req.gt, req.models_dir, out_json=req.out_json
    )
    return {**report.as_dict(), "table": report.table()}


@app.post("/diagnose", response_model=DiagnoseResponse)
def diagnose(req: DiagnoseRequest):
    report = pipeline.diagnose(
        req.image,
        req.templates,
        config=req.to_config(),
        checkpoint=req.checkpoint,
        features_dir=req.features_dir,
        out_dir=req.out_dir,
    )
    return report.as_dict()


def main(host: str = "127.0.0.1", port: int = 8000) -> None:
    """Start a blocking uvicorn server (used by `posekit serve`)."""
    import uvicorn

    pipeline.apply_thread_budget()
    uvicorn.run(app, host=host, port=port)
