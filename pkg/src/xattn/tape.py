"""Reverse-mode automatic differentiation over NumPy arrays.

A small tape: every operation produces a `Tensor` holding a float64 array,
the parents it was computed from, and a closure that routes the incoming
gradient to those parents. `Tensor.backward()` walks the graph once in
reverse topological order. The tape is rebuilt per forward pass and freed
with it.

The attention operation is the one fused primitive: it exposes the
post-softmax probabilities as a graph node of their own, so a backward pass
can both read their gradient (the saliency tap) and keep differentiating
through them into the projections. The heavy lifting is delegated to
:mod:`xattn.kernels`, which picks the compiled core or the NumPy fallback.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from xattn import kernels as K


class Tensor:
    """Array-valued node of the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of self w.r.t. every reachable tape node."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        _accum(self, np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; non-Tensor operands are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None] | None,
    force_grad: bool = False,
) -> Tensor:
    rg = force_grad or any(p.requires_grad for p in parents)
    out = Tensor(data, rg)
    if rg and backward is not None:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _node(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)

    def backward(g):
        _accum(x, g * mask)

    return _node(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500.0, 500.0)))

    def backward(g):
        _accum(x, g * data * (1.0 - data))

    return _node(data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500.0, 500.0)))
        _accum(x, g * sig)

    return _node(data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _node(data, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inverse))

    return _node(data, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape).copy())

    return _node(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), _wrap(1.0 / float(count)))


def take_rows(x: Tensor, idx: Iterable[int]) -> Tensor:
    index = np.asarray(list(idx), dtype=np.intp)
    data = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        _accum(x, gx)

    return _node(data, (x,), backward)


def pick(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """Select one entry as a scalar tensor."""
    data = np.asarray(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        _accum(x, gx)

    return _node(data, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        dxhat = g * gamma.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (
            (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, inv * term)
        reduce_axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        _accum(beta, g.sum(axis=reduce_axes))

    return _node(data, (x, gamma, beta), backward)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: float,
    tap: bool = False,
    override: dict[tuple[int, int, int], float] | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention for stacked heads.

    Returns ``(probs, out)`` where ``probs`` is the post-softmax attention
    tensor ``[n_h, n_q, n_kv]`` exposed as its own tape node and
    ``out = probs @ v``. With ``tap=True`` the probability node requires
    grad even under frozen weights, so ``probs.grad`` after a backward pass
    is the partial derivative of the objective w.r.t. the recorded
    probabilities. ``override`` pins selected ``(head, row, col)`` entries
    after the softmax without renormalizing, which is exactly the
    perturbation the finite-difference oracle needs.
    """
    p_data = K.attn_probs(q.data, k.data, scale)
    if override:
        for site, value in override.items():
            p_data[site] = value

    def probs_backward(g):
        d_q, d_k = K.attn_probs_backward(p_data, q.data, k.data, scale, g)
        _accum(q, d_q)
        _accum(k, d_k)

    probs = _node(p_data, (q, k), probs_backward, force_grad=tap)

    out_data = K.attn_mix(p_data, v.data)

    def out_backward(g):
        d_probs, d_v = K.attn_mix_backward(p_data, v.data, g)
        _accum(probs, d_probs)
        _accum(v, d_v)

    out = _node(out_data, (probs, v), out_backward)
    return probs, out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against constant targets.

    Uses the stable identity softplus(z) - t*z; returns the elementwise
    loss tensor (caller reduces).
    """
    t = _wrap(np.asarray(targets, dtype=np.float64))
    return sub(softplus(logits), mul(t, logits))
