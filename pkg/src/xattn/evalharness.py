"""Perturbation sweeps, toy detection score, AUC, and the sanity check.

The perturbation test ranks all pixels of a scene globally by saliency
(highest first in positive mode, lowest first in negative mode), masks the
top fraction by filling with the camera's per-channel mean of the clean
image, and tracks the detection score as the fraction grows. Saliency is
computed once per scene from the clean pass and reused across fractions.
"""

from __future__ import annotations

import concurrent.futures
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from xattn.detector import Weights, filter_detections, forward
from xattn.saliency import METHODS, SaliencyMap, compute_saliency
from xattn.scenegen import GroundTruthObject, Scene

MODES = ("positive", "negative")
MATCH_RADIUS = 0.5
DEFAULT_FRACTIONS = tuple(i / 20 for i in range(21))


@dataclass
class PerturbationCurve:
    method: str
    mode: str
    fractions: list[float]
    scores: list[float]
    auc: float


@dataclass
class SanityReport:
    method: str
    correlations: list[float]
    mean: float
    std: float
    n_skipped: int = 0


def perturb(scene: Scene, smap: SaliencyMap, fraction: float, mode: str) -> Scene:
    """Mask the top `fraction` of pixels ranked globally across all cameras.

    Ties are broken by (camera, row, col) order; masked pixels take their
    camera's per-channel mean computed on the unperturbed image.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n_c, h, w, _ = scene.images.shape
    total = n_c * h * w
    n_masked = int(np.floor(fraction * total + 0.5))
    images = scene.images.copy()
    if n_masked > 0:
        key = smap.per_camera.reshape(total)
        if mode == "positive":
            key = -key
        order = np.argsort(key, kind="stable")
        masked = order[:n_masked]
        fill = scene.images.astype(np.float64).mean(axis=(1, 2)).astype(np.float32)
        flat = images.reshape(total, 3)
        flat[masked] = fill[masked // (h * w)]
    return Scene(id=scene.id, images=images, objects=scene.objects, seed=scene.seed)


def detection_score(
    dets: list, selected: list[int], truth: list[GroundTruthObject]
) -> float:
    """Greedy distance matching inside the match radius; half F1, half closeness."""
    chosen = [d for d in dets if d.query in set(selected)]
    if not truth and not chosen:
        return 1.0
    if not chosen or not truth:
        return 0.0
    pairs = []
    for ti, obj in enumerate(truth):
        for di, det in enumerate(chosen):
            dist = float(np.hypot(det.center[0] - obj.x, det.center[1] - obj.y))
            if dist <= MATCH_RADIUS:
                pairs.append((dist, ti, di))
    pairs.sort()
    used_t: set[int] = set()
    used_d: set[int] = set()
    matches: list[float] = []
    for dist, ti, di in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        matches.append(dist)
    m = len(matches)
    precision = m / len(chosen)
    recall = m / len(truth)
    f1 = 2 * precision * recall / (precision + recall) if m else 0.0
    closeness = float(np.mean([max(0.0, 1.0 - d / MATCH_RADIUS) for d in matches])) if m else 0.0
    return 0.5 * f1 + 0.5 * closeness


def _validate_fractions(fractions) -> list[float]:
    fr = [float(f) for f in fractions]
    if not fr or fr[0] != 0.0:
        raise ValueError("fractions must start at 0")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ValueError("fractions must be strictly ascending")
    if fr[-1] > 1.0:
        raise ValueError("fractions must lie in [0, 1]")
    return fr


def _scene_scores(args) -> list[float]:
    weights, scene, method, mode, fractions, seed, index, threshold = args
    cfg = weights.cfg
    smap = compute_saliency(
        weights, scene, method, threshold=threshold, rng_seed=[seed, index]
    )
    scores = []
    for fraction in fractions:
        perturbed = perturb(scene, smap, fraction, mode)
        dets, _ = forward(weights, perturbed, cfg)
        selected = filter_detections(dets, cfg.threshold if threshold is None else threshold)
        scores.append(detection_score(dets, selected, scene.objects))
    return scores


def run_sweep(
    weights: Weights,
    dataset: list[Scene],
    method: str,
    mode: str,
    fractions=DEFAULT_FRACTIONS,
    seed: int = 0,
    jobs: int = 1,
    threshold: float | None = None,
) -> PerturbationCurve:
    """Average the perturbed detection score over the dataset per fraction."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    fr = _validate_fractions(fractions)
    tasks = [
        (weights, scene, method, mode, fr, seed, i, threshold)
        for i, scene in enumerate(dataset)
    ]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            per_scene = list(pool.map(_scene_scores, tasks, chunksize=1))
    else:
        per_scene = [_scene_scores(t) for t in tasks]
    matrix = np.array(per_scene)  # [n_scenes, n_fractions]
    scores = [float(s) for s in matrix.mean(axis=0)]
    return PerturbationCurve(method=method, mode=mode, fractions=fr, scores=scores, auc=auc(fr, scores))


def auc(fractions, scores) -> float:
    """Trapezoid area with the fraction axis scaled to percent."""
    return float(np.trapezoid(np.asarray(scores, dtype=np.float64), np.asarray(fractions, dtype=np.float64) * 100.0))


def curve_auc(curve: PerturbationCurve) -> float:
    return auc(curve.fractions, curve.scores)


def sanity_check(
    trained: Weights,
    random_w: Weights,
    dataset: list[Scene],
    method: str = "raw-max",
    seed: int = 0,
) -> SanityReport:
    """Model parameter randomization test.

    Saliency under both weight sets is accumulated over the queries the
    trained model selects; per scene the flattened maps are compared by
    Spearman rank correlation. Scenes with no selected queries (or a
    degenerate constant map) are skipped and counted.
    """
    correlations: list[float] = []
    skipped = 0
    for i, scene in enumerate(dataset):
        dets, _ = forward(trained, scene, trained.cfg)
        selected = filter_detections(dets, trained.cfg.threshold)
        if not selected:
            skipped += 1
            continue
        a = compute_saliency(trained, scene, method, queries=selected, rng_seed=[seed, i]).per_camera.ravel()
        b = compute_saliency(random_w, scene, method, queries=selected, rng_seed=[seed, i]).per_camera.ravel()
        if np.array_equal(a, b):
            correlations.append(1.0)
            continue
        rho = stats.spearmanr(a, b).statistic
        if not np.isfinite(rho):
            skipped += 1
            continue
        correlations.append(float(rho))
    mean = float(np.mean(correlations)) if correlations else 0.0
    std = float(np.std(correlations)) if correlations else 0.0
    return SanityReport(method=method, correlations=correlations, mean=mean, std=std, n_skipped=skipped)


def _curve_filename(curve: PerturbationCurve) -> str:
    return f"{curve.mode}_{curve.method.replace('-', '_')}.csv"


def emit_report(
    curves: list[PerturbationCurve],
    out_dir: str | Path,
    n_scenes: int = 0,
    seed: int = 0,
) -> None:
    """One CSV per curve plus a summary with fixed-format AUC strings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for curve in sorted(curves, key=lambda c: (c.method, c.mode)):
        with open(out / _curve_filename(curve), "w", encoding="utf-8") as f:
            f.write("fraction,score\n")
            for fraction, score in zip(curve.fractions, curve.scores):
                f.write(f"{fraction!r},{score!r}\n")
        records.append(
            {
                "method": curve.method,
                "mode": curve.mode,
                "auc": f"{curve.auc:.4f}",
                "n_scenes": n_scenes,
                "seed": seed,
            }
        )
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump({"curves": records}, f, indent=2)
        f.write("\n")


def load_curve(report_dir: str | Path, method: str, mode: str) -> PerturbationCurve | None:
    """Parse an emitted curve back; None if the sweep is absent."""
    root = Path(report_dir)
    path = root / f"{mode}_{method.replace('-', '_')}.csv"
    summary_path = root / "summary.json"
    if not path.exists() or not summary_path.exists():
        return None
    fractions, scores = [], []
    with open(path, "r", encoding="utf-8") as f:
        next(f)
        for line in f:
            a, b = line.strip().split(",")
            fractions.append(float(a))
            scores.append(float(b))
    with open(summary_path, "r", encoding="utf-8") as f:
        summary = json.load(f)
    auc_value = None
    for rec in summary.get("curves", []):
        if rec["method"] == method and rec["mode"] == mode:
            auc_value = float(rec["auc"])
    if auc_value is None:
        return None
    return PerturbationCurve(method=method, mode=mode, fractions=fractions, scores=scores, auc=auc_value)
