"""FAST-9 segment-test corner detection and grid-based spatial thinning."""
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
ARC = 9
RADIUS = 3


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    score: float


def _ring(img):
    """(16, H-6, W-6) stack of circle samples for every interior pixel."""
    h, w = img.shape
    r = RADIUS
    return np.stack([img[r + dy:h - r + dy, r + dx:w - r + dx] for dx, dy in CIRCLE])


def corner_scores(image, threshold):
    """Dense FAST score map (0 where the pixel is not a corner).

    The score of a corner is the best, over all valid 9-pixel arcs, of the
    smallest absolute intensity difference along the arc.
    """
    img = np.asarray(image, dtype=np.int16)
    h, w = img.shape
    r = RADIUS
    center = img[r:h - r, r:w - r]
    diff = _ring(img) - center  # int16, |diff| <= 255
    absdiff = np.abs(diff)
    # duplicate the ring so arcs may wrap around
    diff2 = np.concatenate([diff, diff[:ARC - 1]])
    abs2 = np.concatenate([absdiff, absdiff[:ARC - 1]])
    bright = diff2 > threshold
    dark = diff2 < -threshold
    best = np.zeros(center.shape, dtype=np.int16)
    for s in range(16):
        arc = slice(s, s + ARC)
        valid = bright[arc].all(axis=0) | dark[arc].all(axis=0)
        if valid.any():
            m = abs2[arc].min(axis=0)
            best = np.where(valid & (m > best), m, best)
    scores = np.zeros((h, w), dtype=np.float64)
    scores[r:h - r, r:w - r] = best
    return scores


def _suppress(scores):
    """3x3 non-maximum suppression; equal scores keep the earliest (row-major)."""
    h, w = scores.shape
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = scores
    keep = scores > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (nb < scores) | ((nb == scores) & (not earlier))
    return keep


def fast_detect(image, threshold=20, use_nms=True):
    """FAST-9 keypoints of a uint8 image, in row-major order."""
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < 2 * RADIUS + 1:
        return []
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    scores = corner_scores(image, threshold)
    mask = _suppress(scores) if use_nms else scores > 0
    ys, xs = np.nonzero(mask)
    return [Keypoint(int(x), int(y), float(scores[y, x])) for y, x in zip(ys, xs)]


def grid_distribute(keypoints, width, height, grid_cols, grid_rows, per_cell):
    """Keep the ``per_cell`` strongest keypoints in each grid cell.

    Output is grouped by cell (row-major over cells), strongest first, with
    equal scores ordered by row-major pixel position.
    """
    if grid_cols < 1 or grid_rows < 1 or per_cell < 1:
        raise ValueError("grid dimensions and per_cell must be >= 1")
    cells = {}
    for kp in keypoints:
        cx = min(kp.x * grid_cols // width, grid_cols - 1)
        cy = min(kp.y * grid_rows // height, grid_rows - 1)
        cells.setdefault((cy, cx), []).append(kp)
    out = []
    for key in sorted(cells):
        ranked = sorted(cells[key], key=lambda k: (-k.score, k.y, k.x))
        out.extend(ranked[:per_cell])
    return out


def write_keypoints(path, keypoints):
    with open(path, "w") as fh:
        for kp in keypoints:
            fh.write(f"{kp.x} {kp.y} {kp.score:g}\n")


def read_keypoints(path):
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                x, y, score = int(parts[0]), int(parts[1]), float(parts[2])
            except (IndexError, ValueError):
                raise FormatError(f"{path}:{n}: expected 'x y score'") from None
            out.append(Keypoint(x, y, score))
    return out
