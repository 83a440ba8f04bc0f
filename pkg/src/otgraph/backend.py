"""Kernel backend selection.

The hot array kernels exist twice: a Cython extension (``_fastkern``) and a
numpy fallback (``_npkernels``). The compiled module is preferred when it
imported cleanly; ``OTGRAPH_KERNELS=numpy`` or ``=compiled`` forces a choice.
"""

import logging
import os

from . import _npkernels
from .errors import ConfigError

log = logging.getLogger(__name__)

_forced = os.environ.get("OTGRAPH_KERNELS", "").strip().lower()
if _forced not in ("", "compiled", "numpy"):
    raise ConfigError(
        f"OTGRAPH_KERNELS must be 'compiled' or 'numpy', got {_forced!r}"
    )

_fastkern = None
if _forced != "numpy":
    try:
        from . import _fastkern
    except ImportError:
        if _forced == "compiled":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")

HAVE_COMPILED = _fastkern is not None
BACKEND = "compiled" if HAVE_COMPILED else "numpy"

_impl = _fastkern if HAVE_COMPILED else _npkernels

matmul = _impl.matmul
matmul_nt = _impl.matmul_nt
matmul_tn = _impl.matmul_tn
softmax_rows = _impl.softmax_rows
logsumexp_rows = _impl.logsumexp_rows
logsumexp_cols = _impl.logsumexp_cols
sinkhorn_potentials = _impl.sinkhorn_potentials


def get_backend(name):
    """Return a kernel module by name ('compiled' or 'numpy'); for benchmarks/tests."""
    if name == "numpy":
        return _npkernels
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ConfigError("compiled kernels are not available in this install")
        return _fastkern
    raise ConfigError(f"unknown backend {name!r}")
