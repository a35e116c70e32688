"""Kernel backend selection.

The hot inner loops (gated-recurrence BPTT, LOF scoring) exist twice:
compiled Cython in ``_core`` and pure NumPy in ``_ref``.  The compiled
backend is preferred when the extension was built; set
``CNAV_KERNELS=python`` or ``CNAV_KERNELS=cython`` to force one.

The two backends agree to near machine precision but not bit-for-bit
(different summation orders); reproducibility guarantees elsewhere in
the package hold per backend.
"""

from __future__ import annotations

import os

from . import _ref

_choice = os.environ.get("CNAV_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _ref
elif _choice == "cython":
    from . import _core as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _ref

BACKEND: str = _impl.BACKEND
gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward
cosine_distance_matrix = _impl.cosine_distance_matrix
lof_scores = _impl.lof_scores
lof_scores_from_dist = _impl.lof_scores_from_dist


def get_backend(name: str = "auto"):
    """Return the kernel module for ``name`` ("python", "cython", "auto")."""
    if name == "python":
        return _ref
    if name == "cython":
        from . import _core

        return _core
    return _impl
