"""Attention kernel selection.

Imports the compiled core when available, otherwise the NumPy fallback.
Set ``XATTN_NO_EXT=1`` to force the fallback (the benchmark and the
equivalence tests use this to compare both backends).
"""

from __future__ import annotations

import os

if os.environ.get("XATTN_NO_EXT", "") not in ("", "0"):
    from xattn.kernels import fallback as _impl
else:
    try:
        from xattn.kernels import _cyattn as _impl  # type: ignore[attr-defined]
    except ImportError:
        from xattn.kernels import fallback as _impl

BACKEND: str = _impl.BACKEND
attn_probs = _impl.attn_probs
attn_mix = _impl.attn_mix
attn_mix_backward = _impl.attn_mix_backward
attn_probs_backward = _impl.attn_probs_backward

__all__ = [
    "BACKEND",
    "attn_probs",
    "attn_mix",
    "attn_mix_backward",
    "attn_probs_backward",
]
