"""Brute-force reference implementations used only by the tests."""
from collections import deque

import numpy as np


def naive_conv(x, kernel, bias):
    """Same-size stride-1 convolution by explicit loops over every tap."""
    h, w, cin = x.shape
    n, _, _, cout = kernel.shape
    pad = (n - 1) // 2
    out = np.zeros((h, w, cout), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            for o in range(cout):
                acc = float(bias[o])
                for dr in range(n):
                    for dc in range(n):
                        rr, cc = r + dr - pad, c + dc - pad
                        if 0 <= rr < h and 0 <= cc < w:
                            for j in range(cin):
                                acc += float(x[rr, cc, j]) * float(kernel[dr, dc, j, o])
                out[r, c, o] = acc
    return out


def naive_tconv(x, kernel, bias):
    """Scatter-add of kernel * pixel at stride-2 offsets."""
    h, w, cin = x.shape
    cout = kernel.shape[3]
    out = np.zeros((2 * h, 2 * w, cout), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            for j in range(cin):
                for dr in range(2):
                    for dc in range(2):
                        out[2 * r + dr, 2 * c + dc, :] += x[r, c, j] * kernel[dr, dc, j, :]
    return out + bias


def naive_maxpool(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c), dtype=x.dtype)
    pos = np.zeros((h // 2, w // 2, c, 2), dtype=int)
    for r in range(h // 2):
        for q in range(w // 2):
            for k in range(c):
                best, where = None, None
                for dr in range(2):
                    for dc in range(2):
                        v = x[2 * r + dr, 2 * q + dc, k]
                        if best is None or v > best:
                            best, where = v, (2 * r + dr, 2 * q + dc)
                out[r, q, k] = best
                pos[r, q, k] = where
    return out, pos


def flood_fill_labels(mask):
    """8-connected BFS labeling, labels numbered by row-major first pixel."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    count = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not labels[r, c]:
                count += 1
                labels[r, c] = count
                queue = deque([(r, c)])
                while queue:
                    a, b = queue.popleft()
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            y, x = a + da, b + db
                            if 0 <= y < h and 0 <= x < w and mask[y, x] and not labels[y, x]:
                                labels[y, x] = count
                                queue.append((y, x))
    return labels, count


def numeric_grad(f, x, step=1e-3):
    """Central differences of scalar f() w.r.t. every entry of x (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * step)
    return g


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(n), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad_piecewise(f, x, step=1e-3):
    """Central differences for piecewise-smooth f() -> (value, pattern).

    ``pattern`` identifies the linear piece (ReLU masks, pool winners). When
    one probe lands on a different piece than the unperturbed point, the
    one-sided difference on the matching side is used instead; the central
    difference would average two different derivatives there.
    """
    base_value, base = f()
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up, p_up = f()
        flat[i] = old - step
        down, p_down = f()
        flat[i] = old
        same_up, same_down = p_up == base, p_down == base
        if same_up == same_down:
            gf[i] = (up - down) / (2 * step)
        elif same_up:
            gf[i] = (up - base_value) / step
        else:
            gf[i] = (base_value - down) / step
    return g
