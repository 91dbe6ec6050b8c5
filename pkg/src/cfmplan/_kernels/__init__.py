"""Penalty-kernel backend selection.

Prefers the compiled extension when it imported cleanly; falls back to
the numpy reference.  Set CFMPLAN_PURE=1 to force the fallback (useful
for benchmarking and for debugging suspected kernel issues).
"""
from __future__ import annotations

import os

from . import _ref

BACKEND = "python"
_impl = _ref.penalty_eval

if not os.environ.get("CFMPLAN_PURE"):
    try:
        from . import _fastgeom  # type: ignore[attr-defined]

        _impl = _fastgeom.penalty_eval
        BACKEND = "compiled"
    except ImportError:
        pass


def penalty_eval(wp, obs, seg_a, seg_b, seg_hw, dt, r_ego, v_max,
                 kappa_max, sharp, ksharp, want_grad=False):
    """Dispatch to the active backend; see _ref.penalty_eval for semantics."""
    return _impl(wp, obs, seg_a, seg_b, seg_hw, dt, r_ego, v_max,
                 kappa_max, sharp, ksharp, want_grad)


def reference_eval(wp, obs, seg_a, seg_b, seg_hw, dt, r_ego, v_max,
                   kappa_max, sharp, ksharp, want_grad=False):
    """Always the numpy implementation, for cross-checking the backends."""
    return _ref.penalty_eval(wp, obs, seg_a, seg_b, seg_hw, dt, r_ego,
                             v_max, kappa_max, sharp, ksharp, want_grad)
