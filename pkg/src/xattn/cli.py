"""Command-line entrypoint: data generation, training, inference, saliency
export, perturbation sweeps, sanity checks, and serving."""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from xattn import evalharness, saliency as saliency_mod, scenegen
from xattn.config import RunConfig, ScenegenParams
from xattn.detector import (
    filter_detections,
    forward,
    load_weights,
    random_init,
    save_weights,
    train as train_model,
)
from xattn.scenegen import load_dataset, make_dataset, save_dataset
from xattn.tensorio import TensorIOError

METHOD_CHOICE = click.Choice(saliency_mod.METHODS)
MODE_CHOICE = click.Choice(evalharness.MODES)


def _setup_logging() -> None:
    level = os.environ.get("XATTN_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(name)s %(message)s")


def _parse_fractions(text: str | None):
    if text is None:
        return evalharness.DEFAULT_FRACTIONS
    return [float(part) for part in text.split(",") if part.strip() != ""]


def _load_run_config(config_path: str | None, seed: int | None) -> RunConfig:
    rc = RunConfig.load(config_path)
    if seed is not None:
        rc.seed = seed
    return rc


@click.group()
def cli():
    """Toy multi-camera detector explainability toolkit."""
    _setup_logging()


@cli.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--n-scenes", type=int, default=None)
def gen_data(config_path, seed, out_dir, n_scenes):
    """Generate a synthetic scene dataset."""
    rc = _load_run_config(config_path, seed)
    n = n_scenes if n_scenes is not None else rc.data.n_scenes
    params = ScenegenParams.for_model(
        rc.model,
        noise_amplitude=rc.data.noise_amplitude,
        radius_min=rc.data.radius_min,
        radius_max=rc.data.radius_max,
    )
    scenes = make_dataset(rc.seed, n, params, rc.data.objects_min, rc.data.objects_max)
    save_dataset(scenes, out_dir)
    rc.echo(out_dir)
    click.echo(f"wrote {len(scenes)} scenes to {out_dir}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--steps", type=int, default=None)
def train(config_path, seed, dataset_dir, out_dir, steps):
    """Train the detector on a generated dataset."""
    rc = _load_run_config(config_path, seed)
    if steps is not None:
        import dataclasses

        rc.train = dataclasses.replace(rc.train, steps=steps)
    scenes = load_dataset(dataset_dir)
    weights = train_model(scenes, rc.model, rc.train, seed=rc.seed)
    save_weights(weights, out_dir)
    rc.echo(out_dir)
    click.echo(f"wrote weights to {out_dir}")


@cli.command()
@click.option("--weights", "weights_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--scene", "scene_id", type=str, default=None)
@click.option("--threshold", type=float, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def infer(weights_dir, dataset_dir, scene_id, threshold, out_dir):
    """Run detection on scenes; prints one JSON object per scene."""
    weights = load_weights(weights_dir)
    cfg = weights.cfg
    scenes = load_dataset(dataset_dir)
    if scene_id is not None:
        scenes = [s for s in scenes if s.id == scene_id]
        if not scenes:
            raise click.ClickException(f"unknown scene {scene_id}")
    th = cfg.threshold if threshold is None else threshold
    results = []
    for scene in scenes:
        dets, _ = forward(weights, scene, cfg)
        selected = set(filter_detections(dets, th))
        results.append(
            {
                "scene": scene.id,
                "detections": [
                    {
                        "query": d.query,
                        "class_probs": [float(p) for p in d.class_probs],
                        "center": [d.center[0], d.center[1]],
                        "selected": d.query in selected,
                    }
                    for d in dets
                ],
            }
        )
    text = "\n".join(json.dumps(r) for r in results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "detections.jsonl").write_text(text + "\n", encoding="utf-8")
        RunConfig(model=cfg).echo(out_dir)
        click.echo(f"wrote detections to {out_dir}")
    else:
        click.echo(text)


@cli.command("saliency")
@click.option("--weights", "weights_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--scene", "scene_id", type=str, required=True)
@click.option("--method", type=METHOD_CHOICE, required=True)
@click.option("--query", type=int, default=None, help="explicit query index (default: all selected)")
@click.option("--layer", type=int, default=None)
@click.option("--head", type=int, default=None)
@click.option("--upsample", type=click.Choice(("nearest", "bilinear")), default="nearest")
@click.option("--grad-target", type=click.Choice(("logit", "prob")), default="logit")
@click.option("--threshold", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def saliency_cmd(weights_dir, dataset_dir, scene_id, method, query, layer, head, upsample, grad_target, threshold, seed, out_dir):
    """Export per-camera saliency tensors for one scene."""
    weights = load_weights(weights_dir)
    scenes = {s.id: s for s in load_dataset(dataset_dir)}
    if scene_id not in scenes:
        raise click.ClickException(f"unknown scene {scene_id}")
    smap = saliency_mod.compute_saliency(
        weights,
        scenes[scene_id],
        method,
        queries=[query] if query is not None else None,
        threshold=threshold,
        layer=layer,
        head=head,
        rng_seed=seed,
        upsample=upsample,
        grad_target=grad_target,
    )
    saliency_mod.save_saliency(smap, out_dir, scene_id)
    RunConfig(model=weights.cfg).echo(out_dir)
    click.echo(f"wrote saliency ({method}, queries {smap.queries_used}) to {out_dir}")


@cli.command()
@click.option("--weights", "weights_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--method", type=METHOD_CHOICE, required=True)
@click.option("--mode", type=MODE_CHOICE, required=True)
@click.option("--fractions", type=str, default=None, help="comma-separated, e.g. 0,0.5,1")
@click.option("--threshold", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--jobs", type=int, default=None, help="worker processes (default: cores)")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def perturb(weights_dir, dataset_dir, method, mode, fractions, threshold, seed, jobs, out_dir):
    """Run a perturbation sweep and emit CSV + summary."""
    weights = load_weights(weights_dir)
    scenes = load_dataset(dataset_dir)
    n_jobs = jobs if jobs is not None else (os.cpu_count() or 1)
    curve = evalharness.run_sweep(
        weights,
        scenes,
        method,
        mode,
        fractions=_parse_fractions(fractions),
        seed=seed,
        jobs=n_jobs,
        threshold=threshold,
    )
    evalharness.emit_report([curve], out_dir, n_scenes=len(scenes), seed=seed)
    RunConfig(model=weights.cfg).echo(out_dir)
    click.echo(f"{method}/{mode} auc {curve.auc:.4f} over {len(scenes)} scenes -> {out_dir}")


@cli.command()
@click.option("--weights", "weights_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--method", type=METHOD_CHOICE, default="raw-max")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def sanity(weights_dir, dataset_dir, method, seed, out_dir):
    """Model parameter randomization test against a random-init model."""
    weights = load_weights(weights_dir)
    scenes = load_dataset(dataset_dir)
    random_w = random_init(seed, weights.cfg)
    report = evalharness.sanity_check(weights, random_w, scenes, method=method, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sanity.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "method": report.method,
                "mean": report.mean,
                "std": report.std,
                "n_scenes": len(report.correlations),
                "n_skipped": report.n_skipped,
                "correlations": report.correlations,
            },
            f,
            indent=2,
        )
        f.write("\n")
    RunConfig(model=weights.cfg).echo(out_dir)
    click.echo(f"sanity({method}): mean corr {report.mean:.4f} +/- {report.std:.4f}")


@cli.command()
@click.option("--weights", "weights_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--reports", "reports_dir", type=click.Path(), default=None)
@click.option("--addr", type=str, default="127.0.0.1:8000")
@click.option("--ui-dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
def serve(weights_dir, dataset_dir, reports_dir, addr, ui_dir, seed):
    """Serve the explorer API (and the UI bundle when present)."""
    from xattn.service import create_app, run_server

    default_ui = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    ui = ui_dir if ui_dir is not None else (str(default_ui) if default_ui.exists() else None)
    app = create_app(dataset_dir, weights_dir, reports_dir=reports_dir, seed=seed, ui_dir=ui)
    click.echo(f"serving on http://{addr}")
    run_server(app, addr)


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(exc.exit_code or 1)
    except click.Abort:
        sys.exit(130)
    except (TensorIOError, scenegen.SceneTooCrowdedError, ValueError, RuntimeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
