import subprocess
import sys

import numpy as np
import pytest

from deepdesc import cli, descfile, fast, net, patchio, vocab
from deepdesc.evalkit import parse_report


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("make-dataset", "--synthetic", 40, "--views", 2, "--seed", 3, "--out", d / "ds.dfpd") == 0
    assert run("train", "--dataset", d / "ds.dfpd", "--epochs", 1, "--batch", 8, "--seed", 2,
               "--out", d / "m.dfwt") == 0
    return d


def test_detect_constant_image(tmp_path, capsys):
    patchio.write_pgm(tmp_path / "c.pgm", np.full((40, 50), 100, np.uint8))
    assert run("detect", "--image", tmp_path / "c.pgm", "--out", tmp_path / "k.txt") == 0
    assert (tmp_path / "k.txt").read_text() == ""
    assert "keypoints=0" in capsys.readouterr().out


def test_detect_missing_file(tmp_path):
    assert run("detect", "--image", tmp_path / "nope.pgm", "--out", tmp_path / "k.txt") == 2


def test_detect_bad_pgm(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P6 1 1 255 \0\0\0")
    assert run("detect", "--image", tmp_path / "bad.pgm", "--out", tmp_path / "k.txt") == 2


def test_detect_count_bound(tmp_path):
    img = patchio.synthetic_image(np.random.default_rng(0), 128)
    patchio.write_pgm(tmp_path / "r.pgm", img)
    assert run("detect", "--image", tmp_path / "r.pgm", "--grid", "3x2", "--per-cell", 4,
               "--threshold", 10, "--out", tmp_path / "k.txt") == 0
    kps = fast.read_keypoints(tmp_path / "k.txt")
    assert 0 < len(kps) <= 3 * 2 * 4


def test_usage_errors(tmp_path, capsys):
    assert run("detect", "--image", "x.pgm", "--grid", "3by2", "--out", tmp_path / "k") == 1
    assert run("eval", "--task", "bogus", "--dataset", "x", "--baseline") == 1
    assert "usage" in capsys.readouterr().err
    assert run("describe", "--dataset", "x", "--out", tmp_path / "d") == 1
    assert run("describe", "--baseline", "--out", tmp_path / "d") == 1


def test_module_entry_point_exit_code():
    res = subprocess.run([sys.executable, "-m", "deepdesc", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 1 and "usage" in res.stderr


def test_make_dataset_counts_and_invariants(work):
    ds = patchio.read_dataset(work / "ds.dfpd")
    ds.validate()
    assert len(ds) == 80 and ds.num_labels == 40


def test_make_dataset_from_images(tmp_path, capsys):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(1)
    for n in range(2):
        patchio.write_pgm(imgs / f"{n}.pgm", patchio.synthetic_image(rng, 128))
    assert run("make-dataset", "--images", imgs, "--views", 3, "--seed", 1, "--out", tmp_path / "a.dfpd") == 0
    ds = patchio.read_dataset(tmp_path / "a.dfpd")
    ds.validate()
    assert len(ds) == 3 * ds.num_labels > 0
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("make-dataset", "--images", empty, "--out", tmp_path / "b.dfpd") == 3


def test_train_epochs_zero_writes_init(tmp_path, work):
    assert run("train", "--dataset", work / "ds.dfpd", "--epochs", 0, "--seed", 5, "--out", tmp_path / "z.dfwt") == 0
    assert (tmp_path / "z.dfwt").read_bytes() == net.serialize_model(net.build_model(5))


def test_train_log_and_errors(tmp_path, work, capsys):
    assert run("train", "--dataset", work / "ds.dfpd", "--epochs", 2, "--batch", 8, "--mining", "random",
               "--log", tmp_path / "log.txt", "--out", tmp_path / "r.dfwt") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "epoch\tmean_loss\tactive_fraction\tseconds"
    assert [ln.split("\t")[0] for ln in out[1:]] == ["1", "2"]
    assert len((tmp_path / "log.txt").read_text().splitlines()) == 2
    # batch larger than the label count
    assert run("train", "--dataset", work / "ds.dfpd", "--batch", 64, "--out", tmp_path / "x.dfwt") == 3
    assert run("train", "--dataset", work / "ds.dfpd", "--batch", 1, "--out", tmp_path / "x.dfwt") == 3


def test_describe_dataset_and_time(tmp_path, work, capsys):
    assert run("describe", "--model", work / "m.dfwt", "--dataset", work / "ds.dfpd",
               "--out", tmp_path / "d.dfds", "--time") == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert int(out["descriptors"]) == 80
    for key in ("batch_seconds", "per_patch_seconds", "single_patch_seconds"):
        assert float(out[key]) > 0
    desc = descfile.read_descriptors(tmp_path / "d.dfds")
    assert desc.shape == (80, 128)
    assert np.allclose(np.linalg.norm(desc, axis=1), 1, atol=1e-6)


def test_describe_image_keypoints(tmp_path, work):
    img = patchio.synthetic_image(np.random.default_rng(2), 96)
    patchio.write_pgm(tmp_path / "i.pgm", img)
    fast.write_keypoints(tmp_path / "k.txt", [fast.Keypoint(40, 40, 5.0), fast.Keypoint(2, 2, 5.0)])
    assert run("describe", "--baseline", "--image", tmp_path / "i.pgm", "--keypoints", tmp_path / "k.txt",
               "--out", tmp_path / "d.dfds") == 0
    assert descfile.read_descriptors(tmp_path / "d.dfds").shape == (1, 128)
    (tmp_path / "e.txt").write_text("")
    assert run("describe", "--baseline", "--image", tmp_path / "i.pgm", "--keypoints", tmp_path / "e.txt",
               "--out", tmp_path / "d2.dfds") == 3


def test_descriptor_file_errors(tmp_path):
    desc = np.random.default_rng(3).standard_normal((4, 128))
    data = descfile.serialize_descriptors(desc)
    assert np.array_equal(descfile.deserialize_descriptors(data), desc.astype(np.float32).astype(np.float64))
    (tmp_path / "bad.dfds").write_bytes(data[:-1])
    assert run("vocab", "build", "--descriptors", tmp_path / "bad.dfds", "--out", tmp_path / "v") == 2


def test_vocab_commands(tmp_path, work, capsys):
    assert run("describe", "--model", work / "m.dfwt", "--dataset", work / "ds.dfpd",
               "--out", tmp_path / "d.dfds") == 0
    for name in ("v1", "v2"):
        assert run("vocab", "build", "--descriptors", tmp_path / "d.dfds", "--k", 3, "--depth", 2,
                   "--seed", 4, "--out", tmp_path / name) == 0
    assert (tmp_path / "v1").read_bytes() == (tmp_path / "v2").read_bytes()
    tree = vocab.load_vocab(tmp_path / "v1")
    assert run("vocab", "quantize", "--vocab", tmp_path / "v1", "--descriptors", tmp_path / "d.dfds",
               "--out", tmp_path / "w.txt") == 0
    words = [int(w) for w in (tmp_path / "w.txt").read_text().split()]
    assert len(words) == 80 and max(words) < tree.num_words
    capsys.readouterr()
    assert run("vocab", "score", "--vocab", tmp_path / "v1", "--frameA", tmp_path / "d.dfds",
               "--frameB", tmp_path / "d.dfds") == 0
    assert float(capsys.readouterr().out) == 1.0


def test_eval_commands(tmp_path, work, capsys):
    for task in ("verification", "matching", "retrieval"):
        assert run("eval", "--task", task, "--model", work / "m.dfwt", "--dataset", work / "ds.dfpd",
                   "--report", tmp_path / f"{task}.txt") == 0
        kv = parse_report((tmp_path / f"{task}.txt").read_text())
        assert kv["task"] == task and kv["descriptor"] == "m.dfwt"
        assert 0 <= float(kv.get("ap", kv.get("map"))) <= 1
    capsys.readouterr()
    assert run("eval", "--task", "matching", "--baseline", "--dataset", work / "ds.dfpd") == 0
    assert "map=" in capsys.readouterr().out


def test_eval_perfect_dataset_matching(tmp_path, capsys):
    # two identical views per label: any deterministic descriptor matches perfectly
    ds = patchio.synthetic_dataset(12, 2, seed=1, image_size=96)
    twin = patchio.PatchDataset(np.repeat(ds.labels[::2], 2), np.repeat(ds.patches[::2], 2, axis=0))
    patchio.write_dataset(tmp_path / "twin.dfpd", twin)
    assert run("eval", "--task", "matching", "--baseline", "--dataset", tmp_path / "twin.dfpd") == 0
    assert "map=1\n" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--seed", 2, "--samples", 4) == 0
    first = capsys.readouterr().out
    assert run("gradcheck", "--seed", 2, "--samples", 4) == 0
    assert capsys.readouterr().out == first
    err = float(first.split("max_relative_error=")[1])
    assert err < 1e-6


def test_gradcheck_batch_one_fails(capsys):
    assert run("gradcheck", "--batch", 1) == 3
    assert "at least 2" in capsys.readouterr().err
