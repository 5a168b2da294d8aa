"""Backend selection for the hot loops.

The compiled extension (``mangotree._core``) is used when it imports and the
data is float32; everything else goes to the numpy fallback. Setting
``MANGOTREE_BACKEND=python`` forces the fallback for the whole process.
"""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _reference

_core = None
if os.environ.get("MANGOTREE_BACKEND", "").lower() != "python":
    try:
        from . import _core
    except ImportError:  # extension not built
        _core = None

BACKEND = "compiled" if _core is not None else "python"


def available_backends():
    return ["compiled", "python"] if _core is not None else ["python"]


def get_backend(name=None):
    if name is None:
        name = BACKEND
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled backend is not available")
        return _core
    if name == "python":
        return _reference
    raise ValueError(f"unknown backend {name!r}")


def pick(*arrays, backend=None):
    """Module implementing the kernels for these arrays."""
    if backend is not None:
        return get_backend(backend)
    if _core is not None and all(a.dtype == np.float32 for a in arrays):
        return _core
    return _reference


def pad_channels(a, multiple, axis=-1):
    extra = (-a.shape[axis]) % multiple
    if not extra:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, extra)
    return np.pad(a, widths)


def run_per_example(fn, count, workers=1):
    """Call ``fn(i)`` for every example index; results come back in index order."""
    if workers <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))
