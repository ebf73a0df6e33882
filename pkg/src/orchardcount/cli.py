"""Command-line entry points: synth, run, eval, baseline, init, replay-journal."""

from __future__ import annotations

import json
import os

import click

from .counting import baseline_aic_bic, count_cluster
from .imaging import read_pgm
from .pipeline import PipelineConfig, evaluate_detections, run_pipeline, resume_with_updated_model
from .service import create_app, replay_journal
from .synthgen import SceneSpec, render_sequence


@click.group()
def main():
    """Orchard-row fruit counting pipeline."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), help="SceneSpec JSON file.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output dataset directory.")
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
def synth(config_path, out_dir, seed):
    """Generate a synthetic orchard sequence with ground truth."""
    if config_path:
        with open(config_path) as fh:
            spec = SceneSpec.from_json(fh.read())
    else:
        spec = SceneSpec()
    if seed is not None:
        spec = SceneSpec(**{**json.loads(spec.to_json()), "seed": seed})
    seq = render_sequence(spec, out_dir=out_dir)
    click.echo(
        f"wrote {len(seq.frames)} frames to {out_dir} "
        f"(apples placed {seq.total_placed}, ever visible {seq.unique_visible})"
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--ground-line", nargs=4, type=float, default=None, help="x1 y1 x2 y2 in frame-0 coordinates.")
@click.option("--resume-frame", type=int, default=None, help="Resume from this frame index.")
@click.option("--model", "model_path", type=click.Path(), default=None, help="Model override (with --resume-frame).")
def run(config_path, seed, ground_line, resume_frame, model_path):
    """Usage-phase run: segment, count, track, merge, report."""
    config = PipelineConfig.load(config_path)
    if seed is not None:
        config.seed = seed
    if ground_line is not None:
        config.ground_line = tuple(ground_line)
    if resume_frame is not None:
        report = resume_with_updated_model(
            config, resume_frame, model_path or config.model_path
        )
    else:
        report = run_pipeline(config)
    click.echo(f"total count: {report['total_count']} over {report['frames_processed']} frames")
    if "metrics" in report:
        m = report["metrics"]
        click.echo(
            f"F1 {m['f1']:.4f} (precision {m['precision']:.4f}, recall {m['recall']:.4f}) "
            f"at IoU {m['operating_iou']}"
        )
    click.echo(f"report: {os.path.join(config.output_dir, 'report.json')}")


@main.command("eval")
@click.option("--detections", required=True, type=click.Path(exists=True))
@click.option("--annotations", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--operating-iou", type=float, default=0.01, show_default=True)
@click.option("--svg", is_flag=True, help="Also emit an SVG plot of the PR curves.")
def eval_cmd(detections, annotations, out_dir, operating_iou, svg):
    """Precision/recall/F1 report for a detections file."""
    os.makedirs(out_dir, exist_ok=True)
    metrics = evaluate_detections(
        detections, annotations, out_dir, operating_iou, emit_svg=svg
    )
    click.echo(json.dumps(metrics, indent=1, sort_keys=True))


@main.command()
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True), help="Binary mask (PGM).")
@click.option("--k-max", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def baseline(mask_path, k_max, seed):
    """AIC/BIC versus the reward criterion on one cluster mask (demo)."""
    mask = read_pgm(mask_path)
    scores = baseline_aic_bic(mask, k_max, seed=seed)
    cc = count_cluster(mask, k_max=k_max, seed=seed)
    click.echo(" k    logL        AIC        BIC     reward score")
    rows = {r.k: r for r in cc.score_per_k}
    for row in scores.rows:
        ours = rows.get(row.k)
        click.echo(
            f"{row.k:2d} {row.log_likelihood:10.2f} {row.aic:10.2f} {row.bic:10.2f} "
            f"{ours.score if ours else float('nan'):12.2f}"
        )
    click.echo(
        f"AIC selects k={scores.aic_selected}, BIC selects k={scores.bic_selected}, "
        f"reward criterion selects k={cc.k_selected}"
    )


@main.command()
@click.option("--workdir", required=True, type=click.Path(), help="Session storage directory.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8787, show_default=True)
def init(workdir, host, port):
    """Start the initialization-session HTTP service."""
    import uvicorn

    os.makedirs(workdir, exist_ok=True)
    click.echo(f"serving init sessions from {workdir} at http://{host}:{port}/v1")
    uvicorn.run(create_app(workdir), host=host, port=port, log_level="warning")


@main.command("replay-journal")
@click.option("--journal", "journal_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--session-id", default="replay", show_default=True)
def replay(journal_path, out_path, session_id):
    """Rebuild a model file from a session journal."""
    with open(journal_path) as fh:
        model = replay_journal(fh.read(), session_id)
    model.save(out_path)
    click.echo(f"model with {len(model.saved)} components written to {out_path}")


if __name__ == "__main__":
    main()
