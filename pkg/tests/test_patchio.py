import numpy as np
import pytest

import oracles
from deepdesc import fast, patchio
from deepdesc.errors import (BoundaryError, ConstraintError, DegenerateBatchError,
                             DimensionError, FormatError)
from deepdesc.fast import Keypoint


# ---------------------------------------------------------------- PGM

def test_minimal_pgm():
    img = patchio.parse_pgm(b"P5 2 2 255 " + bytes([1, 2, 3, 4]))
    assert img.tolist() == [[1, 2], [3, 4]]


def test_pgm_comments_and_whitespace():
    data = b"P5\n# a comment\n3\t1 # another\n255\n" + bytes([9, 8, 7])
    assert patchio.parse_pgm(data).tolist() == [[9, 8, 7]]


@pytest.mark.parametrize("data, reason", [
    (b"P6 2 2 255 " + bytes(12), "magic"),
    (b"P5 2 2 65535 " + bytes(8), "maxval"),
    (b"P5 2 2 255 " + bytes(3), "truncated"),
    (b"P5 2 x 255 " + bytes(4), "height"),
])
def test_pgm_errors(data, reason):
    with pytest.raises(FormatError, match=reason):
        patchio.parse_pgm(data)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for n in range(20):
        img = rng.integers(0, 256, size=tuple(rng.integers(1, 40, 2)), dtype=np.uint8)
        path = tmp_path / f"{n}.pgm"
        patchio.write_pgm(path, img)
        assert np.array_equal(patchio.load_pgm(path), img)


def test_missing_pgm(tmp_path):
    with pytest.raises(OSError):
        patchio.load_pgm(tmp_path / "nope.pgm")


# ---------------------------------------------------------------- FAST

def test_constant_image_has_no_corners():
    assert fast.fast_detect(np.full((30, 30), 77, np.uint8), 10) == []


def test_dark_center_on_bright_7x7():
    img = np.full((7, 7), 200, np.uint8)
    img[3, 3] = 20
    assert fast.fast_detect(img, 20) == [Keypoint(3, 3, 180.0)]


def test_dark_blob_ties_keep_earliest():
    img = np.full((21, 21), 200, np.uint8)
    img[9:12, 9:12] = 20
    raw = _as_set(fast.fast_detect(img, 20, use_nms=False))
    assert raw[(10, 10)] == 180.0
    # every blob pixel scores 180; suppression keeps the first in row-major order
    assert fast.fast_detect(img, 20) == [Keypoint(9, 9, 180.0)]


def test_small_image_is_empty():
    assert fast.fast_detect(np.zeros((6, 50), np.uint8), 10) == []


def _as_set(kps):
    return {(k.x, k.y): k.score for k in kps}


def test_fast_matches_segment_test_oracle():
    rng = np.random.default_rng(1)
    for n in range(10):
        img = rng.integers(0, 256, (40, 40)).astype(np.uint8)
        for t in (10, 40):
            ref = oracles.fast_corners(img, t)
            assert _as_set(fast.fast_detect(img, t, use_nms=False)) == ref
            assert _as_set(fast.fast_detect(img, t)) == oracles.nms(ref)


def test_nms_tie_keeps_earliest():
    scores = np.zeros((5, 5))
    scores[2, 2] = scores[2, 3] = 5.0
    keep = fast._suppress(scores)
    assert keep[2, 2] and not keep[2, 3]


def test_keypoint_file_round_trip(tmp_path):
    kps = [Keypoint(3, 4, 12.0), Keypoint(10, 7, 40.5)]
    fast.write_keypoints(tmp_path / "k.txt", kps)
    assert fast.read_keypoints(tmp_path / "k.txt") == kps


def test_grid_one_cell_keeps_top():
    rng = np.random.default_rng(2)
    kps = [Keypoint(int(x), int(y), float(s))
           for x, y, s in zip(rng.integers(0, 10, 100), rng.integers(0, 10, 100), rng.permutation(100) + 1)]
    out = fast.grid_distribute(kps, 40, 40, 4, 4, 5)
    assert [k.score for k in out] == [100, 99, 98, 97, 96]


def test_grid_few_points_is_reordering():
    kps = [Keypoint(35, 35, 1.0), Keypoint(1, 1, 2.0), Keypoint(20, 3, 3.0)]
    out = fast.grid_distribute(kps, 40, 40, 2, 2, 3)
    assert sorted(out, key=lambda k: k.x) == sorted(kps, key=lambda k: k.x)
    assert out[0] == Keypoint(1, 1, 2.0)


def test_grid_against_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        w, h = (int(v) for v in rng.integers(20, 100, 2))
        cols, rows, per = (int(v) for v in rng.integers(1, 5, 3))
        kps = [Keypoint(int(rng.integers(0, w)), int(rng.integers(0, h)), float(rng.integers(1, 6)))
               for _ in range(int(rng.integers(0, 60)))]
        out = fast.grid_distribute(kps, w, h, cols, rows, per)
        assert len(out) <= cols * rows * per
        expect = []
        for cy in range(rows):
            for cx in range(cols):
                cell = [k for k in kps if k.x * cols // w == cx and k.y * rows // h == cy]
                cell.sort(key=lambda k: (-k.score, k.y, k.x))
                expect += cell[:per]
        assert out == expect


def test_grid_rejects_bad_dims():
    with pytest.raises(ValueError):
        fast.grid_distribute([], 10, 10, 0, 1, 1)


# ---------------------------------------------------------------- patches

def test_extract_constant_patch_is_zero():
    img = np.full((40, 40), 9, np.uint8)
    p = patchio.extract_patch(img, Keypoint(20, 20, 1.0))
    assert p.shape == (32, 32) and not p.any()


def test_extract_without_normalize_is_copy():
    img = np.random.default_rng(4).integers(0, 256, (50, 60)).astype(np.uint8)
    p = patchio.extract_patch(img, Keypoint(30, 25, 1.0), normalize=False)
    assert p.dtype == np.float64 and np.array_equal(p, img[9:41, 14:46])


def test_extract_normalized_statistics():
    img = np.random.default_rng(5).integers(0, 256, (50, 50)).astype(np.uint8)
    p = patchio.extract_patch(img, Keypoint(25, 25, 1.0))
    assert abs(p.mean()) < 1e-9 and abs(p.std() - 1) < 1e-6


def test_extract_boundary():
    img = np.zeros((40, 40), np.uint8)
    with pytest.raises(BoundaryError):
        patchio.extract_patch(img, Keypoint(10, 20, 1.0))
    patchio.extract_patch(img, Keypoint(16, 16, 1.0))
    with pytest.raises(BoundaryError):
        patchio.extract_patch(img, Keypoint(25, 20, 1.0))


class _Fixed:
    def __init__(self, v):
        self.v = v

    def uniform(self, lo, hi):
        return self.v


def test_augment_zero_equals_crop():
    src = np.random.default_rng(6).integers(0, 256, (48, 48)).astype(np.float64)
    out = patchio.augment(src, _Fixed(0.0))
    assert np.array_equal(out, patchio.normalize_patch(src[8:40, 8:40]))


def test_augment_full_turn():
    src = np.random.default_rng(7).integers(0, 256, (48, 48)).astype(np.float64)
    assert np.max(np.abs(patchio.augment(src, _Fixed(360.0)) - patchio.augment(src, _Fixed(0.0)))) < 1e-9


def test_augment_90_degrees_is_exact_rotation():
    src = np.random.default_rng(8).random((48, 48))
    out = patchio.rotate_crop(src, 90.0)
    assert np.max(np.abs(out - np.rot90(src, 1)[8:40, 8:40])) < 1e-9 or \
        np.max(np.abs(out - np.rot90(src, -1)[8:40, 8:40])) < 1e-9


def test_augment_determinism_and_range():
    src = np.random.default_rng(9).random((48, 48))
    a = patchio.augment(src, np.random.default_rng(3))
    b = patchio.augment(src, np.random.default_rng(3))
    assert np.array_equal(a, b)
    with pytest.raises(DimensionError):
        patchio.augment(np.zeros((40, 40)), np.random.default_rng(0))


# ---------------------------------------------------------------- datasets

def _image_with_keypoints(rng):
    img = patchio.synthetic_image(rng, 160)
    kps = [Keypoint(int(x), int(y), 1.0) for x, y in rng.integers(24, 136, (10, 2))]
    return img, kps


def test_build_dataset_counts():
    rng = np.random.default_rng(10)
    img, kps = _image_with_keypoints(rng)
    ds = patchio.build_dataset([img], [kps], 2, rng)
    ds.validate()
    assert len(ds) == 20 and ds.num_labels == 10
    assert all(len(g) == 2 for g in ds.groups[1])


def test_build_dataset_skips_border_and_needs_views():
    rng = np.random.default_rng(11)
    img, kps = _image_with_keypoints(rng)
    ds = patchio.build_dataset([img], [kps + [Keypoint(5, 5, 1.0)]], 3, rng)
    assert ds.num_labels == 10 and len(ds) == 30
    with pytest.raises(ConstraintError):
        patchio.build_dataset([img], [kps], 1, rng)


def test_dataset_round_trip(tmp_path):
    ds = patchio.synthetic_dataset(12, 3, seed=2, image_size=96)
    path = tmp_path / "d.dfpd"
    patchio.write_dataset(path, ds)
    back = patchio.read_dataset(path)
    assert patchio.serialize_dataset(back) == path.read_bytes()
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.patches, ds.patches)


def test_dataset_format_errors():
    data = patchio.serialize_dataset(patchio.synthetic_dataset(3, 2, seed=0, image_size=96))
    for bad in (b"DFPX" + data[4:], data[:-1], data + b"\0"):
        with pytest.raises(FormatError):
            patchio.deserialize_dataset(bad)


def test_validate_single_view():
    ds = patchio.PatchDataset(np.array([0, 0, 1]), np.zeros((3, 32, 32)))
    with pytest.raises(ConstraintError):
        ds.validate()


def test_synthetic_determinism():
    a = patchio.synthetic_dataset(20, 2, seed=5, image_size=96)
    b = patchio.synthetic_dataset(20, 2, seed=5, image_size=96)
    c = patchio.synthetic_dataset(20, 2, seed=6, image_size=96)
    assert patchio.serialize_dataset(a) == patchio.serialize_dataset(b)
    assert patchio.serialize_dataset(a) != patchio.serialize_dataset(c)
    assert a.num_labels == 20 and len(a) == 40


@pytest.fixture(scope="module")
def small():
    return patchio.synthetic_dataset(30, 3, seed=1, image_size=96)


def test_batch_of_all_labels(small):
    b = patchio.sample_batch(small, 30, np.random.default_rng(0))
    assert sorted(b.labels.tolist()) == list(range(30))
    assert b.anchors.shape == b.positives.shape == (30, 32, 32)


def test_batch_too_large(small):
    with pytest.raises(DegenerateBatchError):
        patchio.sample_batch(small, 31, np.random.default_rng(0))


def test_batch_labels_unique_and_views_distinct(small):
    rng = np.random.default_rng(1)
    norm = patchio.normalize_patches(small.patches)
    for _ in range(1000):
        b = patchio.sample_batch(small, 8, rng)
        assert len(set(b.labels.tolist())) == 8
    for lab, a, p in zip(b.labels, b.anchors, b.positives):
        views = [i for i in np.flatnonzero(small.labels == lab)]
        ia = [i for i in views if np.array_equal(norm[i], a)]
        ip = [i for i in views if np.array_equal(norm[i], p)]
        assert ia and ip and set(ia) != set(ip)


def test_batch_determinism(small):
    a = patchio.sample_batch(small, 10, np.random.default_rng(4))
    b = patchio.sample_batch(small, 10, np.random.default_rng(4))
    assert np.array_equal(a.anchors, b.anchors) and np.array_equal(a.labels, b.labels)
