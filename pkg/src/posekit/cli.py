"""Command-line client: onboard, estimate, train, eval, diagnose, serve.

Subcommands run the pipeline in-process by default. With --server URL they
POST the same request to a running `posekit serve` instance instead, in which
case every path is interpreted on the server's filesystem.

Exit codes: 0 success, 1 pipeline error, 2 usage or unreadable-input error.
"""

from __future__ import annotations

import json
import sys

import click

from . import __version__, pipeline
from .errors import (
    CheckpointFormatError,
    MeshFormatError,
    PosekitError,
    ResultFormatError,
)

_USAGE_ERRORS = (MeshFormatError, CheckpointFormatError, ResultFormatError)


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _local(fn):
    """Run a pipeline callable, mapping failures to the exit-code contract."""
    try:
        return fn()
    except _USAGE_ERRORS as e:
        _fail(str(e), 2)
    except OSError as e:
        _fail(str(e), 2)
    except PosekitError as e:
        _fail(str(e), 1)


def _post(server: str, endpoint: str, payload: dict) -> dict:
    """Send one request to a `posekit serve` instance and unwrap errors."""
    import httpx

    url = server.rstrip("/") + endpoint
    resp = httpx.post(url, json=payload, timeout=None)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        _fail(f"{url} -> {resp.status_code}: {detail}",
              2 if resp.status_code < 500 else 1)
    return resp.json()


def _knob_options(fn):
    """Estimation knobs shared by estimate and diagnose."""
    opts = [
        click.option("--backbone", type=click.Choice(pipeline.BACKBONES),
                     default="toy", show_default=True,
                     help="Descriptor source for query and templates."),
        click.option("--temperature", type=float, default=None,
                     help="Dual-softmax temperature (default: per-backbone)."),
        click.option("--threshold", type=float, default=0.2, show_default=True,
                     help="Dual-softmax confidence threshold."),
        click.option("--ransac-iterations", type=int, default=800,
                     show_default=True, help="RANSAC hypothesis count."),
        click.option("--reproj-px", type=float, default=14.0, show_default=True,
                     help="Inlier reprojection threshold in crop pixels."),
        click.option("--seed", type=int, default=0, show_default=True,
                     help="Seed for all randomized stages."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _config_from_knobs(backbone, temperature, threshold, ransac_iterations,
                       reproj_px, seed) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        backbone=backbone, temperature=temperature, threshold=threshold,
        ransac_iterations=ransac_iterations, reproj_px=reproj_px, seed=seed,
    )


server_option = click.option(
    "--server", default=None, metavar="URL",
    help="POST to a running service instead of running in-process.",
)


@click.group()
@click.version_option(__version__)
def main():
    """Desk-scale 6D object pose estimation toolkit."""
    pipeline.apply_thread_budget()


@main.command()
@click.argument("mesh_path")
@click.argument("out_dir")
@click.option("--frequency", type=int, default=2, show_default=True,
              help="Icosphere subdivision frequency (views = 10f^2+2).")
@click.option("--resolution", type=int, default=420, show_default=True,
              help="Template image side in pixels (multiple of 14).")
@click.option("--object-id", default=None, help="Name stored in the set metadata.")
@server_option
def onboard(mesh_path, out_dir, frequency, resolution, object_id, server):
    """Render a mesh into a template set directory."""
    if server:
        body = _post(server, "/onboard", {
            "mesh_path": mesh_path, "out_dir": out_dir,
            "frequency": frequency, "resolution": resolution,
            "object_id": object_id,
        })
    else:
        report = _local(lambda: pipeline.onboard(
            mesh_path, out_dir, frequency=frequency, resolution=resolution,
            object_id=object_id,
        ))
        body = report.as_dict()
    click.echo(f"object {body['object_id']}: diameter {body['diameter']:.6f} m, "
               f"{body['view_count']} views, {body['seconds']:.2f} s")


@main.command()
@click.argument("images", nargs=-1, required=True)
@click.option("--detections", required=True,
              help="JSON file of per-image detection lists.")
@click.option("--templates", required=True, help="Onboarded template directory.")
@click.option("--checkpoint", default=None, help="Trained model weights (.opfw).")
@click.option("--features-dir", default=None,
              help="Directory of exported descriptor stacks (imported backbone).")
@click.option("--out-csv", default=None, help="Write result rows here.")
@click.option("--out-json", default=None, help="Write pose records here.")
@click.option("--scene-id", type=int, default=0, show_default=True,
              help="Scene id stamped on result rows.")
@_knob_options
@server_option
def estimate(images, detections, templates, checkpoint, features_dir, out_csv,
             out_json, scene_id, server, **knobs):
    """Estimate object poses for detections in one or more images."""
    if server:
        body = _post(server, "/estimate", {
            "images": list(images), "detections": detections,
            "templates": templates, "checkpoint": checkpoint,
            "features_dir": features_dir, "out_csv": out_csv,
            "out_json": out_json, "scene_id": scene_id, **knobs,
        })
        click.echo(json.dumps(body["outcomes"], indent=1))
        return
    config = _config_from_knobs(**knobs)
    outcomes = _local(lambda: pipeline.estimate_batch(
        images, detections, templates, config=config, checkpoint=checkpoint,
        features_dir=features_dir, out_csv=out_csv, out_json=out_json,
        scene_id=scene_id,
    ))
    click.echo(json.dumps(pipeline.stable_outcome_dicts(outcomes), indent=1))


@main.command()
@click.argument("config_path")
@server_option
def train(config_path, server):
    """Train descriptor weights from a JSON run configuration."""
    if server:
        body = _post(server, "/train", {"config": config_path})
    else:
        report = _local(lambda: pipeline.run_training(config_path))
        body = report.as_dict()
    click.echo(f"trained steps {body['start_step']}..{body['steps']}: "
               f"loss {body['first_loss']:.4f} -> {body['final_loss']:.4f} "
               f"(smoothed drop {body['smoothed_drop']:.1%})")
    if body.get("checkpoint"):
        click.echo(f"checkpoint: {body['checkpoint']}")


@main.command("eval")
@click.argument("results_csv")
@click.argument("gt_json")
@click.argument("models_dir")
@click.option("--out-json", default=None, help="Write the metric report here.")
@server_option
def eval_cmd(results_csv, gt_json, models_dir, out_json, server):
    """Score a result table against ground truth (AR/AP per object)."""
    if server:
        body = _post(server, "/evaluate", {
            "results": results_csv, "gt": gt_json, "models_dir": models_dir,
            "out_json": out_json,
        })
        click.echo(body["table"])
        return
    report = _local(lambda: pipeline.evaluate(
        results_csv, gt_json, models_dir, out_json=out_json,
    ))
    click.echo(report.table())


@main.command()
@click.argument("image_path")
@click.option("--templates", required=True, help="Onboarded template directory.")
@click.option("--checkpoint", default=None, help="Trained model weights (.opfw).")
@click.option("--features-dir", default=None,
              help="Directory of exported descriptor stacks (imported backbone).")
@click.option("--out-dir", default="diagnostics", show_default=True,
              help="Where overlays, histograms, and dumps are written.")
@_knob_options
@server_option
def diagnose(image_path, templates, checkpoint, features_dir, out_dir, server,
             **knobs):
    """Dump correspondences, vote histograms, and match overlays."""
    if server:
        body = _post(server, "/diagnose", {
            "image": image_path, "templates": templates,
            "checkpoint": checkpoint, "features_dir": features_dir,
            "out_dir": out_dir, **knobs,
        })
    else:
        config = _config_from_knobs(**knobs)
        report = _local(lambda: pipeline.diagnose(
            image_path, templates, config=config, checkpoint=checkpoint,
            features_dir=features_dir, out_dir=out_dir,
        ))
        body = report.as_dict()
    click.echo(f"primary template {body['primary_template']}, "
               f"{body['n_correspondences']} correspondences")
    for f in body["files"]:
        click.echo(f"  {f}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    from . import service

    service.main(host=host, port=port)


if __name__ == "__main__":
    main()
