"""Ground-truth colour coding, patches, augmentation, netpbm/CSV files and the
synthetic orchard generator."""
import csv
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

GREEN = (0, 255, 0)
WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
# class-index codes of the 3-class label map
BACKGROUND, MANGO, BOUNDARY = 0, 1, 2
_CLASS_COLORS = {BACKGROUND: BLACK, MANGO: GREEN, BOUNDARY: WHITE}


class AnnotationBox(NamedTuple):
    """Inclusive pixel bounds of one crown."""

    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def validate(self, height=None, width=None):
        if self.xmin > self.xmax or self.ymin > self.ymax or self.xmin < 0 or self.ymin < 0:
            raise ValueError(f"invalid box {tuple(self)}")
        if width is not None and self.xmax >= width or height is not None and self.ymax >= height:
            raise ValueError(f"box {tuple(self)} lies outside a {height}x{width} image")
        return self


class PatchSet(NamedTuple):
    images: np.ndarray  # (N, h, w, 3) uint8
    labels: np.ndarray  # (N, h, w) class indices


# -- ground truth ------------------------------------------------------------

def decode_ground_truth(rgb):
    """Split a green/white/black ground-truth image into its label views.

    Returns ``(class_map, one_hot, label_map)``: the 2-class map (boundary
    counts as background), one-hot planes ordered (mango, boundary,
    background), and class indices 0 background / 1 mango / 2 boundary.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got {rgb.shape}")
    green = np.all(rgb == GREEN, axis=-1)
    white = np.all(rgb == WHITE, axis=-1)
    black = np.all(rgb == BLACK, axis=-1)
    bad = ~(green | white | black)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"pixel (row {r}, col {c}) has non-canonical colour {tuple(rgb[r, c])}")
    label_map = np.where(green, MANGO, np.where(white, BOUNDARY, BACKGROUND)).astype(np.uint8)
    one_hot = np.stack([green, white, black], axis=-1).astype(np.uint8)
    return green.astype(np.uint8), one_hot, label_map


def encode_ground_truth(label_map):
    """Paint class indices back into canonical colours."""
    label_map = np.asarray(label_map)
    if label_map.max(initial=0) > BOUNDARY:
        raise ValueError("label map has indices outside {0, 1, 2}")
    palette = np.array([_CLASS_COLORS[i] for i in range(3)], dtype=np.uint8)
    return palette[label_map]


def semantic_ground_truth(rgb):
    """2-class training target: crowns including their separating bands."""
    _, _, label_map = decode_ground_truth(rgb)
    return (label_map != BACKGROUND).astype(np.uint8)


# -- patches -----------------------------------------------------------------

def crop_patches(image, label, patch=240):
    """Non-overlapping patch grid from the top-left; partial tiles are dropped."""
    h, w = image.shape[:2]
    if label.shape[:2] != (h, w):
        raise ValueError("image and label sizes differ")
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} is smaller than one {patch}x{patch} patch")
    out = []
    for r in range(0, h - patch + 1, patch):
        for c in range(0, w - patch + 1, patch):
            out.append((image[r:r + patch, c:c + patch], label[r:r + patch, c:c + patch]))
    return out


def dihedral(a, k):
    """k in 0..7: rotation by 90*(k % 4) degrees, applied after a transpose when k >= 4."""
    if k >= 4:
        a = np.swapaxes(a, 0, 1)
    return np.rot90(a, k % 4, axes=(0, 1))


def augment(patch, label):
    """The eight rotations/reflections of a square patch and its label."""
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"augmentation needs a square patch, got {patch.shape[:2]}")
    if label.shape[:2] != patch.shape[:2]:
        raise ValueError("patch and label sizes differ")
    return [(np.ascontiguousarray(dihedral(patch, k)), np.ascontiguousarray(dihedral(label, k)))
            for k in range(8)]


def build_patch_set(pairs, num_classes=2, patch=240, with_augment=True):
    """Stack patches from (rgb image, gt rgb image) pairs into training arrays."""
    images, labels = [], []
    for rgb, gt in pairs:
        if num_classes == 2:
            lab = semantic_ground_truth(gt)
        else:
            lab = decode_ground_truth(gt)[2]
        for p, q in crop_patches(rgb, lab, patch):
            for pa, qa in (augment(p, q) if with_augment else [(p, q)]):
                images.append(pa)
                labels.append(qa)
    if not images:
        raise ValueError("no patches")
    return PatchSet(np.stack(images).astype(np.uint8), np.stack(labels).astype(np.uint8))


# -- synthetic orchard scenes ------------------------------------------------

@dataclass
class SceneSpec:
    height: int = 480
    width: int = 480
    crowns: int = 8
    radius_min: float = 18.0
    radius_max: float = 30.0
    overlap_pairs: int = 2
    distractors: int = 6
    seed: int = 0
    # ellipse elongation: semi-axes r*(1+e) and r/(1+e), e <= jitter (area stays pi r^2)
    jitter: float = 0.15
    max_tries: int = 2000

    def validate(self):
        if min(self.crowns, self.overlap_pairs, self.distractors) < 0:
            raise ValueError("counts must be >= 0")
        if self.radius_min < 4 or self.radius_max < self.radius_min:
            raise ValueError("need 4 <= radius_min <= radius_max")
        if 2 * self.overlap_pairs > self.crowns:
            raise ValueError("overlap pairs need two crowns each")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")


@dataclass
class _Crown:
    cy: float
    cx: float
    r: float
    e: float
    angle: float

    @property
    def reach(self):
        return self.r * (1 + self.e)

    def rho(self, yy, xx):
        """Normalised elliptical radius (1 on the rim)."""
        dy, dx = yy - self.cy, xx - self.cx
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = (dx * ca + dy * sa) / (self.r * (1 + self.e))
        v = (-dx * sa + dy * ca) / (self.r / (1 + self.e))
        return np.sqrt(u * u + v * v)


class PackingError(RuntimeError):
    pass


def _place(spec, rng):
    crowns, pairs = [], []
    gap = 4.0

    def radius():
        return rng.uniform(spec.radius_min, spec.radius_max)

    def crown(cy, cx, r):
        return _Crown(cy, cx, r, rng.uniform(0, spec.jitter), rng.uniform(0, np.pi))

    def inside(c):
        m = c.reach + 1
        return m <= c.cy <= spec.height - 1 - m and m <= c.cx <= spec.width - 1 - m

    def clear(c, others, margin):
        return all(np.hypot(c.cy - o.cy, c.cx - o.cx) >= c.reach + o.reach + margin
                   for o in others)

    def random_crown():
        r = radius()
        m = r * (1 + spec.jitter) + 1
        if spec.height - 1 < 2 * m or spec.width - 1 < 2 * m:
            raise PackingError("crown radius does not fit the image")
        return crown(rng.uniform(m, spec.height - 1 - m), rng.uniform(m, spec.width - 1 - m), r)

    for _ in range(spec.overlap_pairs):
        for _ in range(spec.max_tries):
            a = random_crown()
            r2 = radius()
            theta = rng.uniform(0, 2 * np.pi)
            d = (a.r + r2) * rng.uniform(0.6, 0.8)
            b = crown(a.cy + d * np.sin(theta), a.cx + d * np.cos(theta), r2)
            if inside(a) and inside(b) and clear(a, crowns, gap) and clear(b, crowns, gap):
                pairs.append((len(crowns), len(crowns) + 1))
                crowns += [a, b]
                break
        else:
            raise PackingError(f"could not place overlapping pair {len(pairs) + 1} "
                               f"after {spec.max_tries} tries")
    for _ in range(spec.crowns - 2 * spec.overlap_pairs):
        for _ in range(spec.max_tries):
            c = random_crown()
            if inside(c) and clear(c, crowns, gap):
                crowns.append(c)
                break
        else:
            raise PackingError(f"could not place crown {len(crowns) + 1} "
                               f"after {spec.max_tries} tries")
    shrubs = []
    for _ in range(spec.distractors):
        for _ in range(spec.max_tries):
            r = rng.uniform(4.0, 12.0)
            s = _Crown(rng.uniform(r + 1, spec.height - 2 - r),
                       rng.uniform(r + 1, spec.width - 2 - r), r, rng.uniform(0, 0.5),
                       rng.uniform(0, np.pi))
            if clear(s, crowns, 3.0) and clear(s, shrubs, 1.0):
                shrubs.append(s)
                break
        else:
            raise PackingError(f"could not place distractor {len(shrubs) + 1} "
                               f"after {spec.max_tries} tries")
    return crowns, pairs, shrubs


def _noise(rng, shape, sigma, amplitude):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n * (amplitude / max(n.std(), 1e-12))


def synth_scene(spec):
    """Render one synthetic orchard image.

    Returns ``(rgb, gt_rgb, boxes)``. Where two crowns overlap, each pixel
    belongs to the crown whose centre is relatively nearer; the contact
    seam gets a 3-pixel white band (2 px on the first crown, 1 px on the
    second).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    crowns, pairs, shrubs = _place(spec, rng)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    owner = np.zeros((h, w), dtype=np.int32)
    best = np.full((h, w), np.inf)
    for i, c in enumerate(crowns, 1):
        rho = c.rho(yy, xx)
        take = (rho <= 1.0) & (rho < best)
        owner[take] = i
        best[take] = rho[take]

    label = (owner > 0).astype(np.uint8)
    for a, b in pairs:
        in_a, in_b = owner == a + 1, owner == b + 1
        dist_b = ndimage.distance_transform_edt(~in_b)
        dist_a = ndimage.distance_transform_edt(~in_a)
        band = (in_a & (dist_b <= 2.0)) | (in_b & (dist_a <= 1.0))
        label[band] = BOUNDARY

    # soil
    img = np.empty((h, w, 3))
    soil = np.array([128.0, 96.0, 64.0]) + rng.uniform(-12, 12, 3)
    img[:] = soil
    img += _noise(rng, (h, w), 10.0, 14.0)[..., None]
    img += rng.normal(0.0, 6.0, (h, w, 3))

    # distractor vegetation: pale yellow-green grass tufts, kept in the background
    for s in shrubs:
        rho = s.rho(yy, xx)
        m = rho <= 1.0
        tint = np.array([165.0, 160.0, 70.0]) + rng.uniform(-15, 15, 3)
        tex = rng.normal(0.0, 14.0, (h, w))
        img[m] = tint + tex[m, None]

    # crowns: leafy texture with a darker rim, so touching crowns show a seam
    leaf = _noise(rng, (h, w), 1.2, 22.0)
    for i, c in enumerate(crowns, 1):
        m = owner == i
        base = np.array([45.0, 125.0, 40.0]) + rng.uniform(-12, 12, 3)
        shade = 1.0 - 0.5 * best[m] ** 2
        img[m] = base * shade[:, None] + leaf[m, None] * np.array([0.6, 1.0, 0.5])

    rgb = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    gt = encode_ground_truth(label)
    boxes = []
    for i, c in enumerate(crowns, 1):
        rows, cols = np.nonzero(c.rho(yy, xx) <= 1.0)
        boxes.append(AnnotationBox(int(cols.min()), int(rows.min()),
                                   int(cols.max()), int(rows.max())))
    return rgb, gt, boxes


# -- netpbm ------------------------------------------------------------------

def _read_token(buf, pos):
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated netpbm header")
    return buf[start:pos], pos


def read_netpbm(path):
    """Binary PPM (P6) -> (h, w, 3) or PGM (P5) -> (h, w), 8-bit only."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ValueError(f"{path}: bad header field {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    if len(buf) - pos < size:
        raise ValueError(f"{path}: raster truncated")
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_netpbm(path, array):
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("netpbm writer expects uint8 data")
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write an array of shape {a.shape} as PGM/PPM")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes())


# -- CSV and manifests ---------------------------------------------------------

def write_boxes(path, rows):
    """rows: iterable of (image_id, AnnotationBox)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_id", "xmin", "ymin", "xmax", "ymax"])
        for image_id, b in rows:
            out.writerow([image_id, *map(int, b)])


def read_boxes(path):
    """image_id -> list of AnnotationBox, in file order."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"image_id", "xmin", "ymin", "xmax", "ymax"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for line, row in enumerate(reader, 2):
            try:
                box = AnnotationBox(*(int(row[k]) for k in ("xmin", "ymin", "xmax", "ymax")))
            except ValueError:
                raise ValueError(f"{path}:{line}: non-integer coordinate") from None
            out.setdefault(row["image_id"], []).append(box.validate())
    return out


def write_manifest(path, pairs):
    """One 'image<TAB>ground_truth' line per scene; paths relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as fh:
        for img, gt in pairs:
            fh.write(f"{os.path.relpath(img, base)}\t{os.path.relpath(gt, base)}\n")


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected 'image<TAB>ground_truth'")
            pairs.append(tuple(os.path.join(base, p) for p in parts))
    return pairs
