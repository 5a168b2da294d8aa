"""Pure numpy implementations of the compiled kernels.

Same call signatures as :mod:`mangotree._core`. Works for any float dtype,
which is what the 64-bit gradient checks rely on.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"
CHANNEL_MULTIPLE = 1


def _windows(xp, n):
    # (h, w, cin, n, n) view -> (h*w, n*n*cin) rows ordered (kh, kw, cin)
    v = sliding_window_view(xp, (n, n), axis=(0, 1))
    h, w, cin = v.shape[:3]
    return np.ascontiguousarray(v.transpose(0, 1, 3, 4, 2)).reshape(h * w, n * n * cin), h, w


def conv_forward(xp, w, bias):
    n, _, cin, cout = w.shape
    if xp.shape[2] != cin or bias.shape[0] != cout:
        raise ValueError("kernel/bias shape does not match input channels")
    cols, h, wd = _windows(xp, n)
    out = cols @ w.reshape(n * n * cin, cout)
    out += bias
    return out.reshape(h, wd, cout)


def conv_wgrad(xp, g, dw):
    n, _, cin, cout = dw.shape
    if g.shape[0] != xp.shape[0] - n + 1 or g.shape[1] != xp.shape[1] - n + 1:
        raise ValueError("output gradient shape mismatch")
    cols, _, _ = _windows(xp, n)
    dw += (cols.T @ g.reshape(-1, cout)).reshape(n, n, cin, cout)


def channel_stats(x):
    x64 = x.astype(np.float64, copy=False)
    return x64.sum(axis=0), (x64 * x64).sum(axis=0)


def scale_shift(x, scale, shift, relu):
    out = x * scale + shift
    if relu:
        np.maximum(out, 0, out=out)
    return out


def bn_backward_reduce(x, y, gy, mean, invstd, relu):
    g = np.where(y > 0, gy, 0) if relu else gy
    xhat = (x - mean) * invstd
    g64 = g.astype(np.float64, copy=False)
    return g64.sum(axis=0), (g64 * xhat).sum(axis=0)


def bn_backward_apply(x, y, gy, mean, invstd, coef, mbeta, mgamma, relu):
    g = np.where(y > 0, gy, 0) if relu else gy
    xhat = (x - mean) * invstd
    return coef * (g - mbeta - xhat * mgamma)


def maxpool2_forward(x):
    rows, width, c = x.shape
    if rows % 2 or width % 2:
        raise ValueError("max-pool needs even height and width")
    win = x.reshape(rows // 2, 2, width // 2, 2, c).transpose(0, 2, 4, 1, 3)
    win = win.reshape(rows // 2, width // 2, c, 4)
    # argmax returns the first maximum, i.e. row-major tie-break
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(g, idx):
    oh, ow, c = g.shape
    win = np.zeros((oh, ow, c, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    win = win.reshape(oh, ow, c, 2, 2).transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(win.reshape(2 * oh, 2 * ow, c))


def label8(mask):
    """Two-pass union-find labeling; numbering follows row-major first pixels."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = [0]

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for r in range(h):
        row = mask[r]
        for c in range(w):
            if not row[c]:
                continue
            nbs = []
            if c > 0 and labels[r, c - 1]:
                nbs.append(labels[r, c - 1])
            if r > 0:
                for cc in (c - 1, c, c + 1):
                    if 0 <= cc < w and labels[r - 1, cc]:
                        nbs.append(labels[r - 1, cc])
            if not nbs:
                parent.append(len(parent))
                labels[r, c] = len(parent) - 1
                continue
            best = min(nbs)
            for nb in nbs:
                a, b = find(best), find(nb)
                if a != b:
                    parent[max(a, b)] = min(a, b)
            labels[r, c] = best
    final = np.zeros(len(parent), dtype=np.int32)
    count = 0
    for a in range(1, len(parent)):
        root = find(a)
        if root == a:
            count += 1
            final[a] = count
        else:
            final[a] = final[root]
    return final[labels], count
