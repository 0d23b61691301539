"""Gradients of a detection score w.r.t. the recorded attention maps.

The backward pass differentiates the pre-sigmoid class logit of one
(query, class) pair by default; ``grad_target="prob"`` switches to the
sigmoid output. Gradients are taken w.r.t. the post-softmax attention
probabilities exactly as recorded: the finite-difference oracle below pins
a single probability entry after the softmax (no renormalization) and
re-runs the rest of the forward pass, which is the same partial
derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from xattn import tape
from xattn.detector import (
    AttentionRecord,
    Weights,
    forward_trace,
    record_from_trace,
    wrap_weights,
)
from xattn.scenegen import Scene

GRAD_TARGETS = ("logit", "prob")


class NonFiniteGradientError(RuntimeError):
    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite attention gradient at layer {layer}")


@dataclass
class AttentionGradients:
    """Shapes mirror AttentionRecord; target is the differentiated (query, class)."""

    cross_grad: np.ndarray  # [n_c, n_l, n_h, n_q, n_t]
    self_grad: np.ndarray  # [n_l, n_h, n_q, n_q]
    target: tuple[int, int]


def _check_target(weights: Weights, query: int, class_id: int) -> None:
    cfg = weights.cfg
    if not 0 <= query < cfg.n_q:
        raise ValueError(f"query {query} out of range [0, {cfg.n_q})")
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class {class_id} out of range [0, {cfg.n_classes})")


def attention_gradients(
    weights: Weights,
    scene: Scene,
    query: int,
    class_id: int,
    grad_target: str = "logit",
) -> tuple[AttentionRecord, AttentionGradients]:
    """One taped forward plus one backward pass through the attention taps."""
    _check_target(weights, query, class_id)
    if grad_target not in GRAD_TARGETS:
        raise ValueError(f"grad_target must be one of {GRAD_TARGETS}")
    cfg = weights.cfg
    trace = forward_trace(wrap_weights(weights), scene.images, cfg, tap=True)
    objective = tape.pick(trace.class_logits, (query, class_id))
    if grad_target == "prob":
        objective = tape.sigmoid(objective)
    objective.backward()

    cross_layers = []
    self_layers = []
    for l in range(cfg.n_l):
        gc = trace.cross_probs[l].grad
        gs = trace.self_probs[l].grad
        gc = np.zeros_like(trace.cross_probs[l].data) if gc is None else gc
        gs = np.zeros_like(trace.self_probs[l].data) if gs is None else gs
        if not (np.isfinite(gc).all() and np.isfinite(gs).all()):
            raise NonFiniteGradientError(l)
        cross_layers.append(gc)
        self_layers.append(gs)

    cross = np.stack(cross_layers, axis=0).reshape(cfg.n_l, cfg.n_h, cfg.n_q, cfg.n_c, cfg.n_t)
    cross = np.ascontiguousarray(cross.transpose(3, 0, 1, 2, 4))
    grads = AttentionGradients(
        cross_grad=cross,
        self_grad=np.stack(self_layers, axis=0),
        target=(query, class_id),
    )
    return record_from_trace(trace, cfg), grads


def _site_override(weights: Weights, site: tuple, value: float) -> dict:
    cfg = weights.cfg
    kind = site[0]
    if kind == "cross":
        _, c, l, h, q, t = site
        if not (0 <= c < cfg.n_c and 0 <= l < cfg.n_l and 0 <= h < cfg.n_h and 0 <= q < cfg.n_q and 0 <= t < cfg.n_t):
            raise ValueError(f"site {site} out of range")
        return {("cross", l): {(h, q, c * cfg.n_t + t): value}}
    if kind == "self":
        _, l, h, q, q2 = site
        if not (0 <= l < cfg.n_l and 0 <= h < cfg.n_h and 0 <= q < cfg.n_q and 0 <= q2 < cfg.n_q):
            raise ValueError(f"site {site} out of range")
        return {("self", l): {(h, q, q2): value}}
    raise ValueError(f"site kind must be 'cross' or 'self', got {kind!r}")


def site_value(record: AttentionRecord, site: tuple) -> float:
    if site[0] == "cross":
        _, c, l, h, q, t = site
        return float(record.cross[c, l, h, q, t])
    _, l, h, q, q2 = site
    return float(record.self_[l, h, q, q2])


def _objective_with_override(
    weights: Weights,
    scene: Scene,
    override: dict,
    query: int,
    class_id: int,
    grad_target: str,
) -> float:
    trace = forward_trace(wrap_weights(weights), scene.images, weights.cfg, override=override)
    value = float(trace.class_logits.data[query, class_id])
    if grad_target == "prob":
        value = 1.0 / (1.0 + math.exp(-value))
    return value


def finite_diff_oracle(
    weights: Weights,
    scene: Scene,
    query: int,
    class_id: int,
    site: tuple,
    eps: float = 1e-3,
    grad_target: str = "logit",
) -> float:
    """Central difference of the objective w.r.t. one recorded attention entry.

    Independent of the tape: runs two plain forward passes with the site
    pinned to value +/- eps.
    """
    _check_target(weights, query, class_id)
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    trace = forward_trace(wrap_weights(weights), scene.images, weights.cfg)
    base = site_value(record_from_trace(trace, weights.cfg), site)
    hi = _objective_with_override(weights, scene, _site_override(weights, site, base + eps), query, class_id, grad_target)
    lo = _objective_with_override(weights, scene, _site_override(weights, site, base - eps), query, class_id, grad_target)
    return (hi - lo) / (2.0 * eps)
