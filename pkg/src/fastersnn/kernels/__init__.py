"""Hot loops behind the tensor ops, with a switchable backend.

``FSNN_BACKEND=numba`` (default when numba imports) or ``FSNN_BACKEND=numpy``
selects the implementation at import time; :func:`set_backend` switches it at
runtime. ``FSNN_THREADS`` caps numba and BLAS thread pools.
"""
import os

# the TBB layer shipped with some numba wheels is too old and only warns
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from . import _numpy  # noqa: E402

try:
    from . import _numba
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None

KERNELS = ("im2col", "col2im", "depthwise_forward", "depthwise_backward",
           "maxpool_forward", "maxpool_backward", "lif_forward", "lif_backward")

_active = None


def available_backends():
    return ["numpy"] + (["numba"] if _numba is not None else [])


def set_backend(name):
    """Route every kernel in ``KERNELS`` through ``name`` (``numba`` or ``numpy``)."""
    global _active
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and _numba is None:
        raise RuntimeError("numba backend requested but numba is not importable")
    mod = _numba if name == "numba" else _numpy
    g = globals()
    for fn in KERNELS:
        g[fn] = getattr(mod, fn)
    _active = name


def get_backend():
    return _active


def set_threads(n):
    n = max(1, int(n))
    if _numba is not None:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass


set_backend(os.environ.get("FSNN_BACKEND", "numba" if _numba is not None else "numpy"))
if os.environ.get("FSNN_THREADS"):
    set_threads(os.environ["FSNN_THREADS"])
