"""Layer stacks of the four architectures, whole-network passes and model files."""
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L

ARCH_IDS = {"arch1": 1, "arch2": 2, "arch3": 3, "mango_tree_net": 4}
KIND_TAGS = {"conv": 1, "tconv": 2, "terminal_conv": 3, "conv_plain": 4}
MAGIC = b"MTNW"
FORMAT_VERSION = 1
IN_CHANNELS = 3


class ModelFormatError(ValueError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int = 0
    out_channels: int = 0
    has_batchnorm: bool = False
    activation: str = "none"

    @property
    def parameterized(self):
        return self.kind != "maxpool"


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    num_classes: int

    @property
    def pool_count(self):
        return sum(1 for s in self.layers if s.kind == "maxpool")


def _conv(n, c):
    return LayerSpec("conv", n, c, True, "relu")


_POOL = LayerSpec("maxpool")


def _tconv(c):
    return LayerSpec("tconv", 2, c)


# layer lists per architecture, without the terminal 1x1 conv
_BODIES = {
    "arch1": [_conv(3, 8), _conv(5, 8), _POOL, _conv(7, 16), _POOL, _conv(5, 32),
              _tconv(32), _tconv(16)],
    "arch2": [_conv(3, 8), _conv(5, 8), _POOL, _conv(7, 16), _POOL, _conv(5, 32),
              _tconv(32), _conv(7, 16), _tconv(16), _conv(5, 8), _conv(3, 8)],
    "arch3": [_conv(3, 16), _conv(5, 16), _POOL, _conv(7, 32), _POOL, _conv(5, 64),
              _tconv(64), _conv(7, 32), _tconv(32), _conv(5, 16), _conv(3, 16)],
    "mango_tree_net": [_conv(3, 16), _conv(5, 16), _POOL, _conv(7, 32), _POOL,
                       _conv(5, 64), _POOL, _conv(5, 128), _tconv(128), _conv(5, 64),
                       _tconv(64), _conv(7, 32), _tconv(32), _conv(5, 16), _conv(3, 16)],
}


def build(name, num_classes=2, batchnorm=True):
    """Layer sequence of a named architecture with a 1- or 3-channel head.

    ``batchnorm=False`` drops normalization from the conv blocks (bias + ReLU only).
    """
    if name not in _BODIES:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(_BODIES)}")
    if num_classes == 2:
        head = LayerSpec("terminal_conv", 1, 1, False, "sigmoid")
    elif num_classes == 3:
        head = LayerSpec("terminal_conv", 1, 3, False, "softmax")
    else:
        raise ValueError("num_classes must be 2 or 3")
    body = _BODIES[name]
    if not batchnorm:
        body = [replace(s, has_batchnorm=False) if s.kind == "conv" else s for s in body]
    return NetworkSpec(name, tuple(body) + (head,), num_classes)


def _tag(s):
    if s.kind == "conv" and not s.has_batchnorm:
        return KIND_TAGS["conv_plain"]
    return KIND_TAGS[s.kind]


def _layer_shapes(spec, in_channels=IN_CHANNELS):
    """(kind, n, in, out) for every parameterized layer, in order."""
    shapes = []
    c = in_channels
    for s in spec.layers:
        if s.kind == "maxpool":
            continue
        shapes.append((s, s.kernel_size, c, s.out_channels))
        c = s.out_channels
    return shapes


def count_params(spec, in_channels=IN_CHANNELS):
    """Trainable parameters: kernels, biases and batch-norm scale/offset."""
    total = 0
    for s, n, cin, cout in _layer_shapes(spec, in_channels):
        total += n * n * cin * cout + cout
        if s.has_batchnorm:
            total += 2 * cout
    return total


@dataclass
class LayerParams:
    conv: L.ConvParams
    bn: L.BatchNormParams = None


@dataclass
class Model:
    spec: NetworkSpec
    params: list
    rng_seed: int = 0

    def trainable(self):
        """Flat, ordered list of trainable arrays (updated in place by the optimizer)."""
        out = []
        for p in self.params:
            out += [p.conv.kernel, p.conv.bias]
            if p.bn is not None:
                out += [p.bn.gamma, p.bn.beta]
        return out


def init_params(spec, seed, in_channels=IN_CHANNELS, dtype=np.float32):
    """He-normal kernels (variance 2/fan_in), zero biases, gamma 1, beta 0."""
    rng = np.random.default_rng(seed)
    params = []
    for s, n, cin, cout in _layer_shapes(spec, in_channels):
        std = np.sqrt(2.0 / (n * n * cin))
        kernel = (rng.standard_normal((n, n, cin, cout)) * std).astype(dtype)
        conv = L.ConvParams(kernel, np.zeros(cout, dtype))
        bn = L.BatchNormParams.fresh(cout, dtype) if s.has_batchnorm else None
        params.append(LayerParams(conv, bn))
    return Model(spec, params, seed)


@dataclass
class ForwardCache:
    mode: str
    entries: list = field(default_factory=list)
    scores: np.ndarray = None


def forward(model, x, mode="train", workers=1):
    """Run the network on a (batch, h, w, 3) batch of [0, 1] images.

    Returns ``(output, cache)``: sigmoid probabilities (batch, h, w, 1) or
    softmax probabilities (batch, h, w, 3). ``cache.scores`` holds the
    pre-activation head output.
    """
    if x.ndim != 4:
        raise ValueError("forward expects a (batch, h, w, c) array")
    spec = model.spec
    in_c = model.params[0].conv.in_channels
    if x.shape[-1] != in_c:
        raise ValueError(f"input has {x.shape[-1]} channels, network expects {in_c}")
    factor = 2 ** spec.pool_count
    if x.shape[1] % factor or x.shape[2] % factor:
        raise ValueError(
            f"height and width must be divisible by {factor}, got {x.shape[1]}x{x.shape[2]}")
    dtype = model.params[0].conv.kernel.dtype
    h = np.ascontiguousarray(x, dtype=dtype)
    cache = ForwardCache(mode)
    train = mode == "train"
    pi = iter(model.params)
    for s in spec.layers:
        if s.kind == "maxpool":
            h_next, idx = L.maxpool2(h)
            cache.entries.append(idx if train else None)
        elif s.kind == "tconv":
            p = next(pi)
            h_next = L.tconv2_forward(h, p.conv)
            cache.entries.append(h if train else None)
        elif s.kind == "conv":
            p = next(pi)
            z = L.conv2d_forward(h, p.conv, workers=workers)
            if p.bn is None:
                h_next, bn_cache = L.relu(z), z
            else:
                h_next, bn_cache = L.batchnorm_forward(z, p.bn, mode, relu=True)
            cache.entries.append((h, bn_cache) if train else None)
        else:
            p = next(pi)
            h_next = L.conv2d_forward(h, p.conv, workers=workers)
            cache.entries.append(h if train else None)
        h = h_next
    cache.scores = h
    out = L.sigmoid(h) if spec.num_classes == 2 else L.softmax_lastdim(h)
    return out, cache


def backward(model, cache, grad_scores, workers=1):
    """Parameter gradients given d(loss)/d(head pre-activation).

    Returned list is aligned with :meth:`Model.trainable`.
    """
    if cache is None or cache.mode != "train":
        raise RuntimeError("backward needs the cache of a train-mode forward pass")
    if grad_scores.shape != cache.scores.shape:
        raise ValueError(
            f"gradient shape {grad_scores.shape} does not match output {cache.scores.shape}")
    g = np.ascontiguousarray(grad_scores, dtype=cache.scores.dtype)
    specs = model.spec.layers
    params = [None] * len(specs)
    it = iter(model.params)
    for i, s in enumerate(specs):
        if s.parameterized:
            params[i] = next(it)
    first_param = next(i for i, s in enumerate(specs) if s.parameterized)
    grads = {}
    for i in range(len(specs) - 1, -1, -1):
        s, entry, p = specs[i], cache.entries[i], params[i]
        need_dx = i > first_param
        if s.kind == "maxpool":
            g = L.maxpool2_backward(g, entry)
        elif s.kind == "tconv":
            gx, gk, gb = L.tconv2_backward(entry, p.conv, g)
            grads[i] = [gk, gb]
            g = gx
        elif s.kind == "conv":
            x_in, bn_cache = entry
            if p.bn is None:
                gz = L.relu_backward(bn_cache, g)
            else:
                gz, ggamma, gbeta = L.batchnorm_backward(bn_cache, p.bn, g)
            gx, gk, gb = L.conv2d_backward(x_in, p.conv, gz, need_input_grad=need_dx,
                                           workers=workers)
            grads[i] = [gk, gb] if p.bn is None else [gk, gb, ggamma, gbeta]
            g = gx
        else:
            gx, gk, gb = L.conv2d_backward(entry, p.conv, g, need_input_grad=need_dx,
                                           workers=workers)
            grads[i] = [gk, gb]
            g = gx
    out = []
    for i, s in enumerate(specs):
        if s.parameterized:
            out += grads[i]
    return out


# -- model files -------------------------------------------------------------

_HEADER = struct.Struct("<4sIBBH")
_LAYER = struct.Struct("<B4I")


def save(model, path):
    spec = model.spec
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, ARCH_IDS[spec.name], spec.num_classes,
                           len(model.params))]
    for (s, n, cin, cout), p in zip(_layer_shapes(spec, model.params[0].conv.in_channels),
                                    model.params):
        chunks.append(_LAYER.pack(_tag(s), n, n, cin, cout))
        arrays = [p.conv.kernel, p.conv.bias]
        if s.has_batchnorm:
            arrays += [p.bn.gamma, p.bn.beta, p.bn.running_mean, p.bn.running_var]
        chunks += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load(path, expect_arch=None):
    """Read a model file; ``expect_arch`` guards against loading the wrong network."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise ModelFormatError(f"truncated header at offset {len(buf)}")
    magic, version, arch_id, num_classes, nlayers = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version} at offset 4")
    names = {v: k for k, v in ARCH_IDS.items()}
    if arch_id not in names:
        raise ModelFormatError(f"unknown architecture id {arch_id} at offset 8")
    name = names[arch_id]
    if expect_arch is not None and expect_arch != name:
        raise ArchitectureMismatchError(f"file holds {name}, expected {expect_arch}")
    # the first layer record tells whether the conv blocks carry batch norm
    first_tag = buf[_HEADER.size] if len(buf) > _HEADER.size else None
    try:
        spec = build(name, num_classes, batchnorm=first_tag != KIND_TAGS["conv_plain"])
    except ValueError as exc:
        raise ModelFormatError(f"{exc} (offset 9)") from None
    expected = _layer_shapes(spec)
    if nlayers != len(expected):
        raise ModelFormatError(f"layer count {nlayers} != {len(expected)} at offset 10")
    off = _HEADER.size
    params = []
    for s, n, cin, cout in expected:
        if off + _LAYER.size > len(buf):
            raise ModelFormatError(f"truncated layer record at offset {off}")
        tag, d0, d1, d2, d3 = _LAYER.unpack_from(buf, off)
        if tag != _tag(s) or (d0, d1, d2, d3) != (n, n, cin, cout):
            raise ModelFormatError(f"layer record does not match {name} at offset {off}")
        off += _LAYER.size
        sizes = [n * n * cin * cout, cout] + ([cout] * 4 if s.has_batchnorm else [])
        arrays = []
        for size in sizes:
            nbytes = 4 * size
            if off + nbytes > len(buf):
                raise ModelFormatError(f"truncated parameter data at offset {off}")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=size, offset=off)
                          .astype(np.float32))
            off += nbytes
        conv = L.ConvParams(arrays[0].reshape(n, n, cin, cout), arrays[1])
        bn = None
        if s.has_batchnorm:
            bn = L.BatchNormParams(*arrays[2:6])
        params.append(LayerParams(conv, bn))
    if off != len(buf):
        raise ModelFormatError(f"trailing bytes at offset {off}")
    return Model(spec, params)
