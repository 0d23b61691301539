"""Saliency map generation from recorded attention.

Six methods: three gradient-free reductions of the raw cross-attention
(last layer, mean over layers, max over layers), two gradient-weighted
aggregations (attention grad-cam and relevancy rollout), and a random
baseline. All of them produce per-query token maps ``[n_c, n_q, n_t]``
that :func:`assemble` reshapes to the token grid, upsamples to pixels, and
accumulates over the selected queries into one map per camera.

Head and layer means are accumulated index-by-index so that a naive loop
reference reproduces them bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xattn.config import ModelConfig
from xattn.detector import (
    AttentionRecord,
    Weights,
    detections_from_trace,
    filter_detections,
    forward_trace,
    record_from_trace,
    wrap_weights,
)
from xattn.gradients import AttentionGradients, attention_gradients
from xattn.scenegen import Scene
from xattn.tensorio import save_tensor

METHODS = ("raw-last", "raw-mean", "raw-max", "grad-cam", "grad-rollout", "random")
RAW_METHODS = ("raw-last", "raw-mean", "raw-max")
GRAD_METHODS = ("grad-cam", "grad-rollout")


@dataclass
class SaliencyMap:
    method: str
    per_camera: np.ndarray  # [n_c, H, W], entries >= 0
    queries_used: list[int]


def _seq_mean(x: np.ndarray, axis: int) -> np.ndarray:
    """Mean along one axis, accumulated slice by slice in index order."""
    n = x.shape[axis]
    acc = np.take(x, 0, axis=axis).astype(np.float64).copy()
    for i in range(1, n):
        acc += np.take(x, i, axis=axis)
    return acc / n


def raw_last(rec: AttentionRecord, layer: int | None = None) -> np.ndarray:
    """Head-mean of a single decoder layer's cross-attention (default: last)."""
    l = rec.cross.shape[1] - 1 if layer is None else layer
    return np.maximum(_seq_mean(rec.cross[:, l], axis=1), 0.0)


def raw_mean(rec: AttentionRecord) -> np.ndarray:
    """Head-mean, clamp, then layer-mean of the cross-attention."""
    heads = np.maximum(_seq_mean(rec.cross, axis=2), 0.0)
    return _seq_mean(heads, axis=1)


def raw_max(rec: AttentionRecord) -> np.ndarray:
    """Elementwise max over heads, then over layers."""
    return np.maximum.reduce(np.maximum.reduce(rec.cross, axis=2), axis=1)


def raw_slice(
    rec: AttentionRecord, method: str, layer: int | None = None, head: int | None = None
) -> np.ndarray:
    """Raw-attention reduction restricted to an explicit layer and/or head.

    Reduces only over the axes left unspecified (the exploration view).
    """
    if method not in RAW_METHODS:
        raise ValueError(f"layer/head slicing applies to raw methods, not {method!r}")
    x = rec.cross
    if method == "raw-last":
        l = x.shape[1] - 1 if layer is None else layer
        x = x[:, l : l + 1]
    elif layer is not None:
        x = x[:, layer : layer + 1]
    if head is not None:
        x = x[:, :, head : head + 1]
    if method == "raw-max":
        return np.maximum.reduce(np.maximum.reduce(x, axis=2), axis=1)
    return _seq_mean(np.maximum(_seq_mean(x, axis=2), 0.0), axis=1)


def grad_cam(rec: AttentionRecord, grads: AttentionGradients) -> np.ndarray:
    """Mean over layers and heads of the clamped grad-times-attention product."""
    product = np.maximum(grads.cross_grad * rec.cross, 0.0)
    return _seq_mean(_seq_mean(product, axis=2), axis=1)


def _row_normalize(m: np.ndarray) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True)
    out = np.zeros_like(m)
    nz = sums[:, 0] != 0.0
    out[nz] = m[nz] / sums[nz]
    return out


def gradient_rollout(rec: AttentionRecord, grads: AttentionGradients) -> np.ndarray:
    """Layerwise relevancy propagation through self- and cross-attention.

    Per camera: starting from an identity query-query relevancy and a zero
    query-image relevancy, each layer adds the head-averaged clamped
    grad-times-attention of the self-attention into both maps, then adds
    the row-normalized query-query relevancy (zero rows stay zero) applied
    to the layer's cross-attention aggregate.
    """
    n_c, n_l, _, n_q, n_t = rec.cross.shape
    if grads.cross_grad.shape != rec.cross.shape or grads.self_grad.shape != rec.self_.shape:
        raise ValueError("gradient shapes do not match the attention record")
    self_bar = [
        _seq_mean(np.maximum(grads.self_grad[l] * rec.self_[l], 0.0), axis=0)
        for l in range(n_l)
    ]
    out = np.empty((n_c, n_q, n_t))
    for c in range(n_c):
        r_qq = np.eye(n_q)
        r_qi = np.zeros((n_q, n_t))
        for l in range(n_l):
            r_qq = r_qq + self_bar[l] @ r_qq
            r_qi = r_qi + self_bar[l] @ r_qi
            cross_bar = _seq_mean(
                np.maximum(grads.cross_grad[c, l] * rec.cross[c, l], 0.0), axis=0
            )
            r_qi = r_qi + _row_normalize(r_qq).T @ cross_bar
        out[c] = r_qi
    return out


def random_explanation(
    seed, cfg: ModelConfig, mu: float = 0.0, sigma: float = 1.0
) -> np.ndarray:
    """Normal noise clamped at zero, deterministic per seed."""
    rng = np.random.default_rng(seed)
    values = rng.normal(mu, sigma, size=(cfg.n_c, cfg.n_q, cfg.n_t))
    return np.maximum(values, 0.0)


def _upsample_nearest(grid: np.ndarray, patch: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, patch, axis=0), patch, axis=1)


def _upsample_bilinear(grid: np.ndarray, patch: int) -> np.ndarray:
    gh, gw = grid.shape
    h, w = gh * patch, gw * patch
    ys = (np.arange(h) + 0.5) / patch - 0.5
    xs = (np.arange(w) + 0.5) / patch - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 1)
    y1 = np.clip(y0 + 1, 0, gh - 1)
    x1 = np.clip(x0 + 1, 0, gw - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def assemble(
    maps: np.ndarray,
    selected: list[int],
    cfg: ModelConfig,
    method: str = "raw-max",
    upsample: str = "nearest",
) -> SaliencyMap:
    """Sum the selected queries' token maps into per-camera pixel maps.

    Token values are laid out row-major on the ``grid_h x grid_w`` token
    grid and upsampled by the patch edge length (nearest by default,
    bilinear behind the flag). An empty selection yields all-zero maps.
    """
    if upsample not in ("nearest", "bilinear"):
        raise ValueError(f"unknown upsampling {upsample!r}")
    up = _upsample_nearest if upsample == "nearest" else _upsample_bilinear
    per_camera = np.zeros((cfg.n_c, cfg.image_h, cfg.image_w))
    for c in range(cfg.n_c):
        for q in selected:
            grid = maps[c, q].reshape(cfg.grid_h, cfg.grid_w)
            per_camera[c] += up(grid, cfg.patch)
    return SaliencyMap(method=method, per_camera=per_camera, queries_used=list(selected))


def compute_saliency(
    weights: Weights,
    scene: Scene,
    method: str,
    *,
    queries: list[int] | None = None,
    threshold: float | None = None,
    layer: int | None = None,
    head: int | None = None,
    rng_seed=0,
    mu: float = 0.0,
    sigma: float = 1.0,
    upsample: str = "nearest",
    grad_target: str = "logit",
) -> SaliencyMap:
    """Full pipeline for one scene: forward, query selection, method, assembly.

    Gradient methods run one backward pass per selected query, each
    differentiating that query's best class score; the query's own row of
    the resulting token maps is the one accumulated.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    cfg = weights.cfg
    trace = forward_trace(wrap_weights(weights), scene.images, cfg)
    dets = detections_from_trace(trace)
    if queries is None:
        selected = filter_detections(dets, cfg.threshold if threshold is None else threshold)
    else:
        selected = sorted(queries)

    if method == "random":
        maps = random_explanation(rng_seed, cfg, mu=mu, sigma=sigma)
    elif method in RAW_METHODS:
        rec = record_from_trace(trace, cfg)
        if layer is not None or head is not None:
            maps = raw_slice(rec, method, layer=layer, head=head)
        elif method == "raw-last":
            maps = raw_last(rec)
        elif method == "raw-mean":
            maps = raw_mean(rec)
        else:
            maps = raw_max(rec)
    else:
        if layer is not None or head is not None:
            raise ValueError("layer/head slicing applies to raw methods only")
        maps = np.zeros((cfg.n_c, cfg.n_q, cfg.n_t))
        fn = grad_cam if method == "grad-cam" else gradient_rollout
        for q in selected:
            class_id = int(np.argmax(dets[q].class_probs))
            rec, grads = attention_gradients(weights, scene, q, class_id, grad_target=grad_target)
            maps[:, q, :] = fn(rec, grads)[:, q, :]
    return assemble(maps, selected, cfg, method=method, upsample=upsample)


def save_saliency(smap: SaliencyMap, out_dir: str | Path, scene_id: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(smap.per_camera.shape[0]):
        save_tensor(out / f"camera{c}.atns", smap.per_camera[c])
    meta = {"method": smap.method, "queries_used": smap.queries_used, "scene_id": scene_id}
    with open(out / "saliency.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
