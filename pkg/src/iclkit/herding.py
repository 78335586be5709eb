"""Greedy herding exemplar selection with a compiled fast path.

``BACKEND`` names the implementation picked at import: ``"cython"`` when the
extension built, else ``"python"``. Set ``ICLKIT_PURE_PYTHON=1`` to force the
fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _herding_py
from .errors import InputContractError

if os.environ.get("ICLKIT_PURE_PYTHON") == "1":
    _kernel = _herding_py.herding_order
    BACKEND = "python"
else:
    try:
        from ._herding import herding_order as _kernel

        BACKEND = "cython"
    except ImportError:
        _kernel = _herding_py.herding_order
        BACKEND = "python"

__all__ = ["herding_select", "BACKEND"]


def herding_select(features, budget: int, *, backend: str | None = None) -> list[int]:
    """Return up to ``budget`` row indices of ``features`` in herding order.

    At iteration ``j`` the candidate minimising
    ``||mu - (sum(selected) + candidate) / (j + 1)||`` is taken, where ``mu``
    is the mean of all rows. Ties go to the lowest index. The order does not
    depend on ``budget`` beyond truncation.
    """
    feats = np.ascontiguousarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise InputContractError("herding needs a non-empty 2-D feature array")
    if budget < 1:
        raise InputContractError("budget must be >= 1")
    mu = np.ascontiguousarray(feats.mean(axis=0))
    if backend is None:
        kernel = _kernel
    elif backend == "python":
        kernel = _herding_py.herding_order
    elif backend == "cython":
        from ._herding import herding_order as kernel
    else:
        raise InputContractError(f"unknown herding backend {backend!r}")
    return kernel(feats, mu, int(budget)).tolist()
