"""Kernel dispatch: the compiled extension when importable, else the numpy fallback.

Set ``EAQ_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("EAQ_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

import numpy as np


def discounted_cumsum(rewards, gamma):
    return _impl.discounted_cumsum(np.ascontiguousarray(rewards, dtype=np.float64), float(gamma))


def batch_discounted_cumsum(rewards, lengths, gamma):
    return _impl.batch_discounted_cumsum(
        np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(lengths, dtype=np.int64),
        float(gamma),
    )


def nearest_distances(cand, ref):
    """Euclidean distance from each row of ``cand`` to its closest row of ``ref``."""
    return _impl.nearest_distances(
        np.ascontiguousarray(cand, dtype=np.float64), np.ascontiguousarray(ref, dtype=np.float64)
    )


def focus_fire_counts(actions, alive, first_attack, num_attack):
    """Return ``(focused, total)`` over timesteps where every alive agent attacks."""
    return _impl.focus_fire_counts(
        np.ascontiguousarray(actions, dtype=np.int64),
        np.ascontiguousarray(alive, dtype=np.uint8),
        int(first_attack),
        int(num_attack),
    )
