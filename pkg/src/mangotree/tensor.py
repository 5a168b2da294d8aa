"""Dense feature-map helpers.

Feature maps are plain numpy arrays in (h, w, c) order, batches in
(batch, h, w, c) order, always C-contiguous. Training runs in float32; the
gradient checks use float64.
"""
import numpy as np

DTYPE = np.float32


def as_tensor3(a, dtype=None):
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.ndim != 3 or min(a.shape) < 1:
        raise ValueError(f"expected a non-empty (h, w, c) array, got shape {a.shape}")
    return a


def as_tensor4(a, dtype=None):
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.ndim != 4 or min(a.shape) < 1:
        raise ValueError(f"expected a non-empty (batch, h, w, c) array, got shape {a.shape}")
    return a


def zero_pad(t, pad_h, pad_w):
    """Zero border of ``pad_h`` rows and ``pad_w`` columns around the spatial axes.

    Works for (h, w, c) and (batch, h, w, c) arrays.
    """
    if pad_h < 0 or pad_w < 0:
        raise ValueError("padding must be non-negative")
    if pad_h == 0 and pad_w == 0:
        return np.ascontiguousarray(t)
    widths = [(0, 0)] * t.ndim
    widths[-3] = (pad_h, pad_h)
    widths[-2] = (pad_w, pad_w)
    return np.pad(t, widths)


def crop(t, pad_h, pad_w):
    """Inverse of :func:`zero_pad`."""
    h, w = t.shape[-3], t.shape[-2]
    return t[..., pad_h:h - pad_h, pad_w:w - pad_w, :]


def reduce_mean_var(t):
    """Per-channel mean and population variance over every axis but the last."""
    if t.size == 0:
        raise ValueError("empty tensor")
    flat = t.reshape(-1, t.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    var = ((flat - mean) ** 2).mean(axis=0)
    return mean, var
