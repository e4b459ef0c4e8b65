"""Image ingestion, patch extraction, augmentation and patch datasets.

Datasets hold raw 8-bit 32x32 patches grouped by label; every label has at
least two views so that an (anchor, positive) pair can always be drawn.
Normalisation to zero mean / unit variance happens when patches are fed to
the network.
"""
import os
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .binio import Reader, atomic_write, pack_u32, read_bytes
from .errors import (BoundaryError, ConstraintError, DegenerateBatchError,
                     DimensionError, FormatError)
from .fast import fast_detect, grid_distribute

PATCH_SIZE = 32
SUPPORT_SIZE = 48
NORM_STD_EPS = 1e-8


# ---------------------------------------------------------------- PGM files

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*[\n\r])*([^\s#]+)")


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval <= 255 into an (H, W) uint8 array."""
    if data[:2] != b"P5":
        raise FormatError(f"not a binary PGM: magic {data[:2]!r}", 0)
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        m = _PGM_TOKEN.match(data, pos)
        if not m or not m.group(1).isdigit():
            raise FormatError(f"bad or missing {what} in PGM header", pos)
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError("PGM dimensions must be positive", pos)
    if not 0 < maxval <= 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", pos)
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r", b"\x0b", b"\x0c"):
        raise FormatError("missing whitespace after PGM maxval", pos)
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise FormatError(f"truncated PGM raster: need {need} bytes, have {len(data) - pos}", pos)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def load_pgm(path) -> np.ndarray:
    return parse_pgm(read_bytes(path))


def encode_pgm(image) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    return b"P5\n%d %d\n255\n" % (w, h) + image.tobytes()


def write_pgm(path, image):
    atomic_write(path, encode_pgm(image))


# ---------------------------------------------------------------- patches

def normalize_patches(patches) -> np.ndarray:
    """Per-patch zero-mean / unit-std normalisation of an (N, H, W) stack.

    Uses the population std plus 1e-8; constant patches map to all zeros.
    """
    x = np.asarray(patches, dtype=np.float64)
    mean = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mean
    std = np.sqrt((centered * centered).mean(axis=(1, 2), keepdims=True))
    out = centered / (std + NORM_STD_EPS)
    out[std[:, 0, 0] == 0] = 0.0
    return out


def normalize_patch(patch) -> np.ndarray:
    return normalize_patches(np.asarray(patch)[None])[0]


def extract_patch(image, keypoint, size=PATCH_SIZE, normalize=True):
    """size x size window whose centre (offset size/2) is the keypoint."""
    x0, y0 = keypoint.x - size // 2, keypoint.y - size // 2
    h, w = image.shape
    if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise BoundaryError(
            f"{size}x{size} window at ({keypoint.x}, {keypoint.y}) leaves the {w}x{h} image")
    patch = np.asarray(image[y0:y0 + size, x0:x0 + size], dtype=np.float64)
    return normalize_patch(patch) if normalize else patch.copy()


def bilinear(image, xs, ys):
    """Sample ``image`` at float coordinates with edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx, fy = xs - x0, ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
            + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)


def rotate_crop(source, angle_deg, size=PATCH_SIZE):
    """Rotate ``source`` about its centre and take the central size x size crop.

    Returned values are unnormalised floats. At angle 0 this is an exact
    copy of the centre crop.
    """
    src = np.asarray(source, dtype=np.float64)
    h, w = src.shape
    need = int(np.ceil(size * np.sqrt(2.0))) + 2
    if h < need or w < need:
        raise DimensionError(f"source window {w}x{h} too small for a rotated {size}x{size} crop")
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    off_x, off_y = (w - size) // 2, (h - size) // 2
    rows, cols = np.mgrid[0:size, 0:size]
    u = (cols + off_x) - cx
    v = (rows + off_y) - cy
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return bilinear(src, c * u - s * v + cx, s * u + c * v + cy)


def augment(source, rng, max_rotation_deg=20.0, normalize=True):
    """Random rotation in [-max, max] degrees, centre crop to 32x32, normalise."""
    angle = rng.uniform(-max_rotation_deg, max_rotation_deg)
    patch = rotate_crop(source, angle)
    return normalize_patch(patch) if normalize else patch


def to_bytes(values):
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- datasets

@dataclass
class PatchDataset:
    labels: np.ndarray  # (R,) uint32
    patches: np.ndarray  # (R, size, size) uint8
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.patches = np.ascontiguousarray(self.patches, dtype=np.uint8)
        self._groups = None

    def __len__(self):
        return len(self.labels)

    @property
    def groups(self):
        """Sorted unique labels and, for each, the record indices holding it."""
        if self._groups is None:
            order = np.argsort(self.labels, kind="stable")
            uniq, starts = np.unique(self.labels[order], return_index=True)
            self._groups = (uniq, np.split(order, starts[1:]))
        return self._groups

    @property
    def num_labels(self):
        return len(self.groups[0])

    def validate(self):
        """Raise ConstraintError unless every label has at least two views."""
        if self.patches.shape != (len(self.labels), self.patch_size, self.patch_size):
            raise ConstraintError(f"patch array shape {self.patches.shape} inconsistent")
        for label, idx in zip(*self.groups):
            if len(idx) < 2:
                raise ConstraintError(f"label {label} has a single view")

    def subset(self, labels):
        keep = np.isin(self.labels, np.asarray(list(labels), dtype=np.uint32))
        return PatchDataset(self.labels[keep], self.patches[keep], self.patch_size)


def serialize_dataset(ds: PatchDataset) -> bytes:
    s = ds.patch_size
    records = np.empty(len(ds), dtype=[("label", "<u4"), ("pix", "u1", (s * s,))])
    records["label"] = ds.labels
    records["pix"] = ds.patches.reshape(len(ds), s * s)
    return b"DFPD" + pack_u32(1, s, len(ds)) + records.tobytes()


def deserialize_dataset(data: bytes) -> PatchDataset:
    r = Reader(data)
    r.magic(b"DFPD")
    r.version(1)
    at = r.pos
    size = r.u32("patch size")
    if size == 0:
        raise FormatError("patch size must be positive", at)
    count = r.u32("record count")
    rec = 4 + size * size
    raw = r.raw(count * rec, f"{count} records")
    r.finish()
    records = np.frombuffer(raw, dtype=[("label", "<u4"), ("pix", "u1", (size * size,))])
    return PatchDataset(records["label"].copy(), records["pix"].reshape(count, size, size).copy(), size)


def write_dataset(path, ds):
    atomic_write(path, serialize_dataset(ds))


def read_dataset(path) -> PatchDataset:
    return deserialize_dataset(read_bytes(path))


def build_dataset(images, keypoints, views_per_label, rng, max_rotation_deg=20.0):
    """Dataset of augmented views around keypoints of the given images.

    ``keypoints[i]`` lists the keypoints of ``images[i]``. Each keypoint whose
    48x48 support window fits inside its image becomes one label with
    ``views_per_label`` independently rotated views; the rest are skipped.
    """
    if views_per_label < 2:
        raise ConstraintError("each label needs at least 2 views")
    labels, patches = [], []
    half = SUPPORT_SIZE // 2
    for image, kps in zip(images, keypoints):
        h, w = image.shape
        for kp in kps:
            if kp.x < half or kp.y < half or kp.x + half > w or kp.y + half > h:
                continue
            window = image[kp.y - half:kp.y + half, kp.x - half:kp.x + half]
            label = len(labels) // views_per_label
            for _ in range(views_per_label):
                patches.append(to_bytes(augment(window, rng, max_rotation_deg, normalize=False)))
                labels.append(label)
    if not labels:
        return PatchDataset(np.zeros(0, np.uint32), np.zeros((0, PATCH_SIZE, PATCH_SIZE), np.uint8))
    return PatchDataset(np.array(labels), np.stack(patches))


def detect_for_dataset(image, threshold=20, grid=(4, 4), per_cell=4):
    """FAST keypoints spread evenly over a grid."""
    kps = fast_detect(image, threshold, use_nms=True)
    h, w = image.shape
    return grid_distribute(kps, w, h, grid[0], grid[1], per_cell)


# ---------------------------------------------------------------- synthetic data

def synthetic_image(rng, size=192):
    """Random texture: multi-scale smoothed noise plus shaded rectangles and disks."""
    img = np.zeros((size, size))
    for sigma, amp in ((8.0, 60.0), (3.0, 35.0), (1.2, 20.0)):
        noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
        img += amp * noise / (noise.std() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(12, 20))):
        value = rng.uniform(-90, 90)
        cx, cy = rng.uniform(0, size, 2)
        a, b = rng.uniform(4, 22, 2)
        if rng.random() < 0.5:
            mask = (np.abs(xx - cx) < a) & (np.abs(yy - cy) < b)
        else:
            mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 < 1.0
        img[mask] += value
    return to_bytes(128.0 + img)


def random_homography(rng, size, max_angle_deg=15.0, max_scale=0.1, max_persp=5e-4):
    """Mild perspective warp about the image centre (maps reference -> view)."""
    c = (size - 1) / 2.0
    t = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
    sx, sy = 1.0 + rng.uniform(-max_scale, max_scale, 2)
    shear = rng.uniform(-0.05, 0.05)
    a = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) @ np.array([[sx, shear], [0, sy]])
    h = np.eye(3)
    h[:2, :2] = a
    h[2, :2] = rng.uniform(-max_persp, max_persp, 2)
    to_c = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    back = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
    return back @ h @ to_c


def warp_image(image, hmat):
    """Resample ``image`` so that output(H x) = image(x)."""
    size_y, size_x = image.shape
    inv = np.linalg.inv(hmat)
    yy, xx = np.mgrid[0:size_y, 0:size_x].astype(np.float64)
    pts = inv @ np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    xs, ys = pts[0] / pts[2], pts[1] / pts[2]
    return bilinear(image, xs, ys).reshape(image.shape)


def _project(hmat, x, y):
    p = hmat @ np.array([x, y, 1.0])
    return p[0] / p[2], p[1] / p[2]


def synthetic_dataset(n_labels, views_per_label, seed, max_rotation_deg=20.0,
                      image_size=192, noise_std=3.0):
    """Deterministic HPatches-style dataset from generated textures.

    For each generated image, ``views_per_label`` warped copies are produced
    with independent random homographies and photometric changes. FAST
    keypoints detected on the reference become labels; view ``v`` of a label
    is the augmented support window around the keypoint's image in copy ``v``.
    """
    if views_per_label < 2:
        raise ConstraintError("each label needs at least 2 views")
    if n_labels < 1:
        raise ConstraintError("n_labels must be positive")
    rng = np.random.default_rng(seed)
    half = SUPPORT_SIZE // 2
    labels, patches = [], []
    n = 0
    while n < n_labels:
        ref = synthetic_image(rng, image_size)
        kps = detect_for_dataset(ref)
        views = []
        for _ in range(views_per_label):
            hmat = random_homography(rng, image_size)
            gain, bias = rng.uniform(0.7, 1.3), rng.uniform(-20, 20)
            views.append((hmat, gain * warp_image(ref, hmat) + bias))
        for kp in kps:
            if n >= n_labels:
                break
            windows = []
            for hmat, img in views:
                x, y = _project(hmat, kp.x, kp.y)
                xi, yi = int(round(x)), int(round(y))
                if xi < half or yi < half or xi + half > image_size or yi + half > image_size:
                    break
                windows.append(img[yi - half:yi + half, xi - half:xi + half])
            if len(windows) < views_per_label:
                continue
            for win in windows:
                raw = augment(win, rng, max_rotation_deg, normalize=False)
                raw = raw + rng.normal(0.0, noise_std, raw.shape)
                patches.append(to_bytes(raw))
                labels.append(n)
            n += 1
    return PatchDataset(np.array(labels), np.stack(patches))


# ---------------------------------------------------------------- batches

@dataclass
class TripletBatch:
    anchors: np.ndarray  # (N, 32, 32) normalised
    positives: np.ndarray  # (N, 32, 32) normalised
    labels: np.ndarray  # (N,) distinct


def sample_batch(dataset, batch_size, rng) -> TripletBatch:
    """N distinct labels drawn without replacement, two distinct views each."""
    uniq, groups = dataset.groups
    if batch_size < 2:
        raise DegenerateBatchError(f"batch size {batch_size} < 2")
    if batch_size > len(uniq):
        raise DegenerateBatchError(f"batch of {batch_size} needs that many labels, dataset has {len(uniq)}")
    chosen = rng.choice(len(uniq), size=batch_size, replace=False)
    a_idx = np.empty(batch_size, dtype=np.intp)
    p_idx = np.empty(batch_size, dtype=np.intp)
    for n, g in enumerate(chosen):
        members = groups[g]
        if len(members) < 2:
            raise ConstraintError(f"label {uniq[g]} has a single view")
        i, j = rng.choice(len(members), size=2, replace=False)
        a_idx[n], p_idx[n] = members[i], members[j]
    return TripletBatch(normalize_patches(dataset.patches[a_idx]),
                        normalize_patches(dataset.patches[p_idx]),
                        uniq[chosen].copy())


def load_images(directory):
    """All ``*.pgm`` files of a directory, in name order."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    return [load_pgm(os.path.join(directory, n)) for n in names]
