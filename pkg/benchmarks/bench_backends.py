"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_backends.py [--repeat N]``. Each row is a
layer call on a shape taken from a Mango Tree Net training step at batch 4.
"""
import argparse
import time

import numpy as np

from mangotree import kernels
from mangotree import layers as L


def _best(fn, repeat):
    fn()  # warm up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x = rng.random((4, 120, 120, 32), dtype=np.float32)
    g = rng.standard_normal((4, 120, 120, 32), dtype=np.float32)
    conv = L.ConvParams(rng.standard_normal((3, 3, 32, 32), dtype=np.float32) * 0.05,
                        np.zeros(32, np.float32))
    bn = L.BatchNormParams.fresh(32)
    mask = (rng.random((1080, 1920)) < 0.3).astype(np.uint8)
    _, idx = L.maxpool2(x)
    _, bn_cache = L.batchnorm_forward(x, bn, relu=True)

    def bn_fwd(b):
        return L.batchnorm_forward(x, L.BatchNormParams.fresh(32), relu=True, backend=b)

    return {
        "conv3x3 forward 32->32": lambda b: L.conv2d_forward(x, conv, backend=b),
        "conv3x3 backward 32->32": lambda b: L.conv2d_backward(x, conv, g, backend=b),
        "batchnorm+relu forward": bn_fwd,
        "batchnorm+relu backward": lambda b: L.batchnorm_backward(bn_cache, bn, g, backend=b),
        "maxpool2 forward": lambda b: L.maxpool2(x, backend=b),
        "maxpool2 backward": lambda b: L.maxpool2_backward(g[:, ::2, ::2], idx, backend=b),
        "label8 1080x1920": lambda b: kernels.get_backend(b).label8(mask),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        t = {b: _best(lambda: fn(b), args.repeat) for b in backends}
        row = f"{name:<26}" + "".join(f"{t[b] * 1e3:>10.1f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{t['python'] / t['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
