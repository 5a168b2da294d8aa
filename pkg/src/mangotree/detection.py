"""From network outputs to counted, boxed crowns."""
import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import kernels, network
from .data import AnnotationBox

TAU = 0.6
MIN_SIZE = 600
BACKGROUND, MANGO, BOUNDARY = 0, 1, 2
MODES = {"two_class": 2, "three_class": 3}


def threshold_map(prob, tau=TAU):
    """1 where prob > tau (strictly), else 0."""
    prob = np.asarray(prob)
    if prob.ndim == 3 and prob.shape[-1] == 1:
        prob = prob[..., 0]
    return (prob > tau).astype(np.uint8)


def argmax_map(probs):
    """Per-pixel class with the highest probability; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1).astype(np.uint8)


def suppress_boundary(class_map):
    """Boundary and background become 0, mango stays 1."""
    return (np.asarray(class_map) == MANGO).astype(np.uint8)


def connected_components(binary):
    """8-connected labeling; returns (labels int32, count), numbered by first pixel."""
    mask = np.ascontiguousarray(np.asarray(binary) != 0, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError("connected_components expects a 2-D map")
    return kernels.get_backend().label8(mask)


class Detection(NamedTuple):
    component_id: int
    pixel_count: int
    box: AnnotationBox


@dataclass
class DetectionSet:
    detections: list = field(default_factory=list)
    labels: np.ndarray = None  # component map restricted to kept detections

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    @property
    def boxes(self):
        return [d.box for d in self.detections]


def filter_and_boxes(labels, count=None, min_size=MIN_SIZE):
    """Keep components with at least ``min_size`` pixels and box them tightly."""
    labels = np.asarray(labels)
    if count is None:
        count = int(labels.max(initial=0))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    kept = []
    for i, sl in enumerate(ndimage.find_objects(labels, max_label=count), 1):
        if sl is None or sizes[i] < min_size:
            continue
        box = AnnotationBox(int(sl[1].start), int(sl[0].start),
                            int(sl[1].stop - 1), int(sl[0].stop - 1))
        kept.append(Detection(i, int(sizes[i]), box))
    keep = np.zeros(count + 1, dtype=bool)
    keep[[d.component_id for d in kept]] = True
    return DetectionSet(kept, np.where(keep[labels], labels, 0).astype(np.int32))


def _pad_to(image, factor):
    h, w = image.shape[:2]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image


def predict(model, image, workers=1):
    """Infer-mode network output for one (h, w, 3) image, any size.

    uint8 images are scaled to [0, 1]. Sizes that are not a multiple of the
    pooling factor are edge-padded and the output cropped back.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    x = image.astype(np.float32)
    if image.dtype == np.uint8:
        x /= np.float32(255.0)
    x = _pad_to(x, 2 ** model.spec.pool_count)
    probs, _ = network.forward(model, x[None], "infer", workers=workers)
    return probs[0, :h, :w]


def segment(model, image, mode, tau=TAU, workers=1):
    """(class map, probabilities). The class map is binary for two_class and
    holds 0/1/2 for three_class."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {sorted(MODES)}, got {mode!r}")
    if model.spec.num_classes != MODES[mode]:
        raise ValueError(
            f"{mode} needs a {MODES[mode]}-class model, got {model.spec.num_classes} classes")
    probs = predict(model, image, workers)
    if mode == "two_class":
        return threshold_map(probs, tau), probs
    return argmax_map(probs), probs


def detect(model, image, mode, tau=TAU, min_size=MIN_SIZE, workers=1):
    class_map, _ = segment(model, image, mode, tau, workers)
    binary = class_map if mode == "two_class" else suppress_boundary(class_map)
    labels, count = connected_components(binary)
    return filter_and_boxes(labels, count, min_size)


# -- outputs -------------------------------------------------------------------

def heat_map(probs, channel=None):
    """8-bit rendering of a probability plane (mango plane for 3-class output)."""
    probs = np.asarray(probs)
    if probs.ndim == 3:
        probs = probs[..., 0 if channel is None and probs.shape[-1] == 1 else
                      (MANGO if channel is None else channel)]
    return np.clip(np.rint(probs * 255.0), 0, 255).astype(np.uint8)


def annotated_map(binary, detections):
    """Kept crowns at 128, rejected foreground at 64, box outlines at 255."""
    out = np.where(np.asarray(binary) != 0, 64, 0).astype(np.uint8)
    out[detections.labels > 0] = 128
    for b in detections.boxes:
        out[b.ymin, b.xmin:b.xmax + 1] = 255
        out[b.ymax, b.xmin:b.xmax + 1] = 255
        out[b.ymin:b.ymax + 1, b.xmin] = 255
        out[b.ymin:b.ymax + 1, b.xmax] = 255
    return out


def write_detections(path, rows):
    """rows: iterable of (image_id, DetectionSet)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_id", "xmin", "ymin", "xmax", "ymax", "pixel_count"])
        for image_id, dets in rows:
            for d in dets.detections:
                out.writerow([image_id, *d.box, d.pixel_count])
