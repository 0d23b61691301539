"""Decoder-only multi-camera transformer detector.

A linear patch embedding plus a learned per-camera positional encoding
feeds ``n_c * n_t`` image tokens into a stack of pre-norm decoder layers.
Each layer runs self-attention over the object queries, then one
cross-attention in which every query attends to the concatenation of all
cameras' tokens through a single softmax, then a feed-forward block. The
post-softmax attention probabilities of both attention sites are recorded
for every layer and head.

Detection heads map the final query states to per-class sigmoid scores and
a panoramic center ``(x in [0, n_c), y in [0, 1))``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xattn import tape
from xattn.config import ModelConfig, TrainParams
from xattn.scenegen import Scene
from xattn.tensorio import TensorIOError, load_tensor, save_tensor

logger = logging.getLogger("xattn.detector")


class NonFiniteForwardError(RuntimeError):
    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite forward at layer {layer}")


class TrainDivergedError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"training diverged at step {step}")


@dataclass
class AttentionRecord:
    """Post-softmax attention probabilities of one forward pass."""

    cross: np.ndarray  # [n_c, n_l, n_h, n_q, n_t]
    self_: np.ndarray  # [n_l, n_h, n_q, n_q]


@dataclass
class Detection:
    query: int
    class_probs: np.ndarray  # sigmoid scores, one per class
    center: tuple[float, float]  # panoramic (x, y)


class Weights:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, np.ndarray]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def copy(self) -> "Weights":
        return Weights(self.cfg, {k: v.copy() for k, v in self.tensors.items()})


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in a fixed order."""
    d, pdim, d_ff = cfg.d, cfg.patch * cfg.patch * 3, 4 * cfg.d
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("patch_embed.w", (pdim, d), "xavier"),
        ("patch_embed.b", (d,), "zeros"),
        ("pos_enc", (cfg.n_c, cfg.n_t, d), "embed"),
        ("query_embed", (cfg.n_q, d), "embed"),
    ]
    for l in range(cfg.n_l):
        for site in ("self", "cross"):
            for mat in ("wq", "wk", "wv", "wo"):
                specs.append((f"layer{l}.{site}.{mat}", (d, d), "xavier"))
            for vec in ("bq", "bk", "bv", "bo"):
                specs.append((f"layer{l}.{site}.{vec}", (d,), "zeros"))
        for norm in ("norm1", "norm2", "norm3"):
            specs.append((f"layer{l}.{norm}.g", (d,), "ones"))
            specs.append((f"layer{l}.{norm}.b", (d,), "zeros"))
        specs.append((f"layer{l}.ffn.w1", (d, d_ff), "xavier"))
        specs.append((f"layer{l}.ffn.b1", (d_ff,), "zeros"))
        specs.append((f"layer{l}.ffn.w2", (d_ff, d), "xavier"))
        specs.append((f"layer{l}.ffn.b2", (d,), "zeros"))
    specs += [
        ("final_norm.g", (d,), "ones"),
        ("final_norm.b", (d,), "zeros"),
        ("class_head.w", (d, cfg.n_classes), "xavier"),
        ("class_head.b", (cfg.n_classes,), "zeros"),
        ("loc_head.w", (d, 2), "xavier"),
        ("loc_head.b", (2,), "zeros"),
    ]
    return specs


def random_init(seed: int, cfg: ModelConfig) -> Weights:
    """Scaled-uniform initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "xavier":
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-a, a, size=shape)
        elif kind == "embed":
            tensors[name] = rng.uniform(-0.5, 0.5, size=shape)
        elif kind == "ones":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return Weights(cfg, tensors)


def zero_init(cfg: ModelConfig) -> Weights:
    tensors = {
        name: (np.ones(shape) if kind == "ones" else np.zeros(shape))
        for name, shape, kind in _param_specs(cfg)
    }
    return Weights(cfg, tensors)


def image_patches(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Flatten camera images to [n_c * n_t, patch*patch*3] float64 rows."""
    p = cfg.patch
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(cfg.n_c, cfg.grid_h, p, cfg.grid_w, p, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(cfg.n_c * cfg.n_t, p * p * 3))


def _split_heads(x: tape.Tensor, n_h: int, s: int) -> tape.Tensor:
    n = x.shape[0]
    return tape.transpose(tape.reshape(x, (n, n_h, s)), (1, 0, 2))


def _merge_heads(x: tape.Tensor) -> tape.Tensor:
    n_h, n, s = x.shape
    return tape.reshape(tape.transpose(x, (1, 0, 2)), (n, n_h * s))


@dataclass
class ForwardTrace:
    """Tape handles of one forward pass."""

    class_logits: tape.Tensor  # [n_q, n_classes]
    centers: tape.Tensor  # [n_q, 2] panoramic
    self_probs: list[tape.Tensor]  # per layer [n_h, n_q, n_q]
    cross_probs: list[tape.Tensor]  # per layer [n_h, n_q, n_c*n_t]


def wrap_weights(weights: Weights, requires_grad: bool = False) -> dict[str, tape.Tensor]:
    return {k: tape.Tensor(v, requires_grad=requires_grad) for k, v in weights.tensors.items()}


def forward_trace(
    w: dict[str, tape.Tensor],
    images: np.ndarray,
    cfg: ModelConfig,
    tap: bool = False,
    override: dict | None = None,
) -> ForwardTrace:
    """Run the decoder stack; ``override`` pins attention entries post-softmax.

    ``override`` maps ``("cross"|"self", layer) -> {(head, row, col): value}``.
    """
    scale = 1.0 / math.sqrt(cfg.d)
    n_h, s = cfg.n_h, cfg.s

    patches = tape.Tensor(image_patches(images, cfg))
    tokens = patches @ w["patch_embed.w"] + w["patch_embed.b"]
    tokens = tokens + tape.reshape(w["pos_enc"], (cfg.n_c * cfg.n_t, cfg.d))

    def mha(site: str, l: int, x_q: tape.Tensor, kv: tape.Tensor):
        pre = f"layer{l}.{site}"
        q = _split_heads(x_q @ w[f"{pre}.wq"] + w[f"{pre}.bq"], n_h, s)
        k = _split_heads(kv @ w[f"{pre}.wk"] + w[f"{pre}.bk"], n_h, s)
        v = _split_heads(kv @ w[f"{pre}.wv"] + w[f"{pre}.bv"], n_h, s)
        site_override = None if override is None else override.get((site, l))
        probs, att = tape.attention(q, k, v, scale, tap=tap, override=site_override)
        return probs, _merge_heads(att) @ w[f"{pre}.wo"] + w[f"{pre}.bo"]

    x = w["query_embed"]
    self_probs: list[tape.Tensor] = []
    cross_probs: list[tape.Tensor] = []
    for l in range(cfg.n_l):
        h1 = tape.layernorm(x, w[f"layer{l}.norm1.g"], w[f"layer{l}.norm1.b"])
        p_self, sa = mha("self", l, h1, h1)
        x = x + sa
        h2 = tape.layernorm(x, w[f"layer{l}.norm2.g"], w[f"layer{l}.norm2.b"])
        p_cross, ca = mha("cross", l, h2, tokens)
        x = x + ca
        h3 = tape.layernorm(x, w[f"layer{l}.norm3.g"], w[f"layer{l}.norm3.b"])
        ff = tape.relu(h3 @ w[f"layer{l}.ffn.w1"] + w[f"layer{l}.ffn.b1"])
        x = x + ff @ w[f"layer{l}.ffn.w2"] + w[f"layer{l}.ffn.b2"]
        if not np.isfinite(x.data).all():
            raise NonFiniteForwardError(l)
        self_probs.append(p_self)
        cross_probs.append(p_cross)

    x = tape.layernorm(x, w["final_norm.g"], w["final_norm.b"])
    class_logits = x @ w["class_head.w"] + w["class_head.b"]
    loc = tape.sigmoid(x @ w["loc_head.w"] + w["loc_head.b"])
    centers = loc * np.array([float(cfg.n_c), 1.0])
    return ForwardTrace(class_logits, centers, self_probs, cross_probs)


def record_from_trace(trace: ForwardTrace, cfg: ModelConfig) -> AttentionRecord:
    cross = np.stack([p.data for p in trace.cross_probs], axis=0)
    cross = cross.reshape(cfg.n_l, cfg.n_h, cfg.n_q, cfg.n_c, cfg.n_t)
    cross = np.ascontiguousarray(cross.transpose(3, 0, 1, 2, 4))
    self_ = np.stack([p.data for p in trace.self_probs], axis=0)
    return AttentionRecord(cross=cross, self_=self_)


def detections_from_trace(trace: ForwardTrace) -> list[Detection]:
    logits = trace.class_logits.data
    probs = 1.0 / (1.0 + np.exp(-logits))
    centers = trace.centers.data
    return [
        Detection(query=q, class_probs=probs[q].copy(), center=(float(centers[q, 0]), float(centers[q, 1])))
        for q in range(logits.shape[0])
    ]


def forward(weights: Weights, scene: Scene, cfg: ModelConfig) -> tuple[list[Detection], AttentionRecord]:
    """Pure inference pass: detections plus the recorded attention tensors."""
    trace = forward_trace(wrap_weights(weights), scene.images, cfg)
    return detections_from_trace(trace), record_from_trace(trace, cfg)


def filter_detections(dets: list[Detection], threshold: float) -> list[int]:
    """Indices of queries whose best class score clears the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    return [d.query for d in sorted(dets, key=lambda d: d.query) if float(np.max(d.class_probs)) > threshold]


def greedy_match(centers: np.ndarray, truths: list) -> list[tuple[int, int]]:
    """Match each ground-truth object to the nearest unmatched query center.

    Returns (truth index, query index) pairs, truths taken in order.
    """
    taken: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for ti, obj in enumerate(truths):
        target = np.array([obj.x, obj.y])
        best_q, best_d = -1, np.inf
        for q in range(centers.shape[0]):
            if q in taken:
                continue
            dist = float(np.hypot(*(centers[q] - target)))
            if dist < best_d:
                best_q, best_d = q, dist
        if best_q >= 0:
            taken.add(best_q)
            pairs.append((ti, best_q))
    return pairs


def _scene_loss(
    w: dict[str, tape.Tensor], scene: Scene, cfg: ModelConfig, hyper: TrainParams
) -> tape.Tensor:
    trace = forward_trace(w, scene.images, cfg)
    pairs = greedy_match(trace.centers.data, scene.objects)

    class_targets = np.zeros((cfg.n_q, cfg.n_classes))
    for ti, q in pairs:
        class_targets[q, scene.objects[ti].class_id] = 1.0
    loss = tape.tmean(tape.bce_with_logits(trace.class_logits, class_targets))

    if pairs:
        qs = [q for _, q in pairs]
        targets = np.array([[scene.objects[ti].x, scene.objects[ti].y] for ti, _ in pairs])
        diff = tape.take_rows(trace.centers, qs) - targets
        loss = loss + hyper.center_weight * tape.tmean(diff * diff)
    return loss


def train(
    dataset: list[Scene],
    cfg: ModelConfig,
    hyper: TrainParams,
    seed: int = 0,
) -> Weights:
    """Fit the detector on generated scenes with Adam over the tape gradients.

    Deterministic for a fixed (dataset, seed). Raises
    :class:`TrainDivergedError` if the loss goes non-finite.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    weights = random_init(seed, cfg)
    if hyper.steps == 0:
        return weights
    rng = np.random.default_rng(seed + 1)
    names = weights.names()
    m = {k: np.zeros_like(weights[k]) for k in names}
    v = {k: np.zeros_like(weights[k]) for k in names}

    for step in range(1, hyper.steps + 1):
        w = wrap_weights(weights, requires_grad=True)
        idx = rng.integers(0, len(dataset), size=hyper.batch_size)
        loss = _scene_loss(w, dataset[idx[0]], cfg, hyper)
        for i in idx[1:]:
            loss = loss + _scene_loss(w, dataset[i], cfg, hyper)
        loss = loss * (1.0 / len(idx))
        if not np.isfinite(loss.data):
            raise TrainDivergedError(step)
        loss.backward()

        b1c = 1.0 - hyper.beta1**step
        b2c = 1.0 - hyper.beta2**step
        for k in names:
            g = w[k].grad
            if g is None:
                continue
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g
            weights.tensors[k] = weights[k] - hyper.lr * (m[k] / b1c) / (
                np.sqrt(v[k] / b2c) + hyper.adam_eps
            )
        if hyper.log_every and step % hyper.log_every == 0:
            logger.info("step %d loss %.5f", step, float(loss.data))

    acc = classification_accuracy(weights, dataset, cfg)
    logger.info("final training classification accuracy: %.3f", acc)
    return weights


def classification_accuracy(weights: Weights, scenes: list[Scene], cfg: ModelConfig) -> float:
    """Fraction of ground-truth objects whose matched query predicts their class."""
    total, correct = 0, 0
    for scene in scenes:
        dets, _ = forward(weights, scene, cfg)
        centers = np.array([d.center for d in dets])
        for ti, q in greedy_match(centers, scene.objects):
            total += 1
            if int(np.argmax(dets[q].class_probs)) == scene.objects[ti].class_id:
                correct += 1
    return correct / total if total else 1.0


def save_weights(weights: Weights, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "cfg": weights.cfg.to_dict(),
        "tensors": {},
    }
    for name, arr in weights.tensors.items():
        fname = name + ".atns"
        save_tensor(out / fname, arr)
        manifest["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
    with open(out / "weights.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_weights(in_dir: str | Path) -> Weights:
    root = Path(in_dir)
    manifest_path = root / "weights.json"
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise TensorIOError(manifest_path, "file not found") from None
    cfg = ModelConfig.from_dict(manifest["cfg"])
    tensors: dict[str, np.ndarray] = {}
    for name, meta in manifest["tensors"].items():
        path = root / meta["file"]
        if not path.exists():
            raise TensorIOError(manifest_path, f"missing tensor file {meta['file']}")
        arr = load_tensor(path).astype(np.float64)
        if list(arr.shape) != meta["shape"]:
            raise TensorIOError(path, f"dimension mismatch {arr.shape}, manifest implies {meta['shape']}")
        tensors[name] = arr
    return Weights(cfg, tensors)
