"""Losses, the Adam update and the mini-batch training loop."""
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import network

# index order of the 3-class head: background, mango, boundary
BACKGROUND, MANGO, BOUNDARY = 0, 1, 2


def derive_seed(seed, name):
    """Independent integer seed for a named random stream (init, shuffle, synth...)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# -- losses ------------------------------------------------------------------

def sigmoid_ce_loss(y_hat, y, scores=None):
    """Mean binary cross entropy and its gradient w.r.t. the pre-sigmoid score.

    If the pre-activation ``scores`` are given the loss is evaluated in the
    softplus form, which stays finite when the float32 sigmoid saturates.
    """
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} != label shape {y.shape}")
    count = y.size
    t = y.astype(np.float64)
    if scores is not None:
        s = np.asarray(scores, dtype=np.float64).reshape(y.shape)
        per_pixel = np.maximum(s, 0) - s * t + np.log1p(np.exp(-np.abs(s)))
    else:
        p = y_hat.astype(np.float64)
        with np.errstate(divide="ignore"):
            # only the active term is evaluated, so a perfect 0/1 prediction costs 0
            per_pixel = np.where(t > 0.5, -np.log(np.where(t > 0.5, p, 1.0)),
                                 -np.log1p(-np.where(t > 0.5, 0.0, p)))
    loss = float(per_pixel.sum() / count)
    grad = ((y_hat.astype(np.float64) - t) / count).astype(y_hat.dtype)
    return loss, grad


def weighted_softmax_ce_loss(y_hat, y, weights, scores=None):
    """Class-weighted cross entropy over the last axis.

    ``y_hat`` and the one-hot ``y`` share the same plane order, and so do
    ``weights``. Returns the mean loss and the gradient w.r.t. the softmax
    scores, ``w_true * (y_hat - y) / count``.
    """
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    w = np.asarray(weights, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} != label shape {y.shape}")
    if w.shape != (y.shape[-1],) or np.any(w <= 0):
        raise ValueError("need one positive weight per class")
    if not (np.isin(y, (0, 1)).all() and (y.sum(axis=-1) == 1).all()):
        raise ValueError("labels are not one-hot")
    count = y[..., 0].size
    t = y.astype(np.float64)
    w_true = t @ w
    if scores is not None:
        s = np.asarray(scores, dtype=np.float64).reshape(y.shape)
        m = s.max(axis=-1, keepdims=True)
        log_p = s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))
    else:
        with np.errstate(divide="ignore"):
            log_p = np.log(np.where(t > 0, y_hat.astype(np.float64), 1.0))
    per_pixel = -(w_true * (t * log_p).sum(axis=-1))
    loss = float(per_pixel.sum() / count)
    grad = (w_true[..., None] * (y_hat.astype(np.float64) - t) / count).astype(y_hat.dtype)
    return loss, grad


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moments must have the same length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # ordered (boundary, mango, background); unused by the 2-class loss
    class_weights: tuple = (60.0, 1.0, 1.0)
    seed: int = 0
    num_classes: int = 2
    batchnorm: bool = True
    workers: int = 1

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("need 0 <= beta < 1 and eps > 0")
        if self.num_classes not in (2, 3):
            raise ValueError("num_classes must be 2 or 3")
        if len(self.class_weights) != 3 or min(self.class_weights) <= 0:
            raise ValueError("class_weights needs three positive values")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def head_weights(self):
        """Class weights in head channel order (background, mango, boundary)."""
        boundary, mango, background = self.class_weights
        return np.array([background, mango, boundary])


@dataclass
class LossTrace:
    values: list = field(default_factory=list)

    def append(self, value):
        if not np.isfinite(value):
            raise FloatingPointError("epoch loss is not finite")
        self.values.append(float(value))

    def to_csv(self, path):
        rows = ["epoch,avg_loss"] + [f"{i},{v:.6g}" for i, v in enumerate(self.values, 1)]
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            lines = fh.read().split()
        if not lines or lines[0] != "epoch,avg_loss":
            raise ValueError(f"{path}: missing 'epoch,avg_loss' header")
        return cls([float(line.split(",")[1]) for line in lines[1:]])


def batch_loss(model, scores, probs, labels, config):
    """Loss and score gradient for a batch of class-index label maps."""
    if model.spec.num_classes == 2:
        y = labels[..., None].astype(probs.dtype)
        return sigmoid_ce_loss(probs, y, scores=scores)
    onehot = (labels[..., None] == np.arange(3)).astype(probs.dtype)
    return weighted_softmax_ce_loss(probs, onehot, config.head_weights(), scores=scores)


def iterations_per_epoch(n, batch_size):
    return n // batch_size


def _as_input(images):
    if images.dtype == np.uint8:
        return images.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(images, dtype=np.float32)


def train(model, dataset, config, progress=None):
    """Fit ``model`` on ``dataset = (images, labels)``.

    images: (N, h, w, 3) uint8 or [0, 1] floats; labels: (N, h, w) class
    indices (0 background, 1 mango, 2 boundary; 2-class data uses 0/1 only).
    ``progress(epoch, avg_loss)`` is called after every epoch.
    """
    config.validate()
    images, labels = dataset
    n = len(images)
    if n == 0:
        raise ValueError("dataset is empty")
    if len(labels) != n or labels.shape[:3] != images.shape[:3]:
        raise ValueError("images and labels are not congruent")
    factor = 2 ** model.spec.pool_count
    if images.shape[1] % factor or images.shape[2] % factor:
        raise ValueError(f"patch size must be divisible by {factor}")
    if config.num_classes != model.spec.num_classes:
        raise ValueError("config.num_classes does not match the model head")
    if config.batchnorm != any(p.bn is not None for p in model.params):
        raise ValueError("config.batchnorm does not match the model's conv blocks")
    if labels.max() >= model.spec.num_classes:
        raise ValueError("labels contain classes the model cannot predict")
    steps = iterations_per_epoch(n, config.batch_size)
    if steps == 0:
        raise ValueError(f"dataset of {n} patches is smaller than one batch")

    rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    params = model.trainable()
    state = AdamState.zeros_like(params)
    trace = LossTrace()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for it in range(steps):
            idx = np.sort(order[it * config.batch_size:(it + 1) * config.batch_size])
            x = _as_input(images[idx])
            probs, cache = network.forward(model, x, "train", workers=config.workers)
            loss, grad = batch_loss(model, cache.scores, probs, labels[idx], config)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, iteration {it + 1}")
            grads = network.backward(model, cache, grad, workers=config.workers)
            adam_step(params, grads, state, config.learning_rate, config.beta1,
                      config.beta2, config.eps)
            total += loss
        trace.append(total / steps)
        if progress is not None:
            progress(epoch, trace.values[-1])
    return model, trace
