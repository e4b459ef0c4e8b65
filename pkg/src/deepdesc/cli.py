"""Command-line entry point: ``deepdesc <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 format/IO error, 3 numeric or
constraint error.
"""
import argparse
import os
import sys
import time

import numpy as np

from . import descfile, evalkit, fast, net, patchio, vocab
from .errors import (ConstraintError, DegenerateInputError, DimensionError,
                     FormatError, NumericError)
from .gradcheck import network_gradcheck
from .mining import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_CONSTRAINT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _grid(text):
    try:
        cols, rows = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like CxR, got {text!r}") from None
    if cols < 1 or rows < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be >= 1")
    return cols, rows


# ---------------------------------------------------------------- commands

def cmd_detect(args):
    image = patchio.load_pgm(args.image)
    kps = fast.fast_detect(image, args.threshold, use_nms=not args.no_nms)
    h, w = image.shape
    kps = fast.grid_distribute(kps, w, h, args.grid[0], args.grid[1], args.per_cell)
    tmp = args.out + ".tmp"
    fast.write_keypoints(tmp, kps)
    os.replace(tmp, args.out)
    print(f"keypoints={len(kps)}")


def cmd_make_dataset(args):
    if args.synthetic is not None:
        ds = patchio.synthetic_dataset(args.synthetic, args.views, args.seed, args.max_rotation)
    else:
        rng = np.random.default_rng(args.seed)
        images = patchio.load_images(args.images)
        if not images:
            raise ConstraintError(f"no .pgm images in {args.images}")
        kps = [patchio.detect_for_dataset(im, args.threshold, args.grid, args.per_cell) for im in images]
        ds = patchio.build_dataset(images, kps, args.views, rng, args.max_rotation)
        if len(ds) == 0:
            raise ConstraintError("no keypoint has a full 48x48 support window")
    ds.validate()
    patchio.write_dataset(args.out, ds)
    print(f"records={len(ds)} labels={ds.num_labels}")


def cmd_train(args):
    ds = patchio.read_dataset(args.dataset)
    ds.validate()
    cfg = TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.wd,
                      batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                      margin=args.margin, mining=args.mining)
    model = net.build_model(args.seed)
    if args.epochs > 0:
        log = open(args.log, "w") if args.log else None
        try:
            print("epoch\tmean_loss\tactive_fraction\tseconds")
            train(model, ds, cfg, log_file=log, stream=sys.stdout)
        finally:
            if log:
                log.close()
    net.save_model(model, args.out)


def _patches_from_args(args):
    if args.dataset:
        ds = patchio.read_dataset(args.dataset)
        return patchio.normalize_patches(ds.patches)
    if not (args.image and args.keypoints):
        raise UsageError("describe needs --dataset or both --image and --keypoints")
    image = patchio.load_pgm(args.image)
    kps = fast.read_keypoints(args.keypoints)
    patches = []
    for kp in kps:
        try:
            patches.append(patchio.extract_patch(image, kp))
        except patchio.BoundaryError:
            print(f"skipping keypoint ({kp.x}, {kp.y}): window leaves the image", file=sys.stderr)
    if not patches:
        raise ConstraintError("no patches to describe")
    return np.stack(patches)


def _describer(args):
    if args.baseline:
        return evalkit.baseline_raw_descriptor, "baseline"
    if not args.model:
        raise UsageError("--model or --baseline is required")
    model = net.load_model(args.model)
    return (lambda p: net.describe_batch(model, p)), os.path.basename(args.model)


def cmd_describe(args):
    describe, _ = _describer(args)
    patches = _patches_from_args(args)
    t0 = time.perf_counter()
    desc = describe(patches)
    elapsed = time.perf_counter() - t0
    descfile.write_descriptors(args.out, desc)
    print(f"descriptors={len(desc)}")
    if args.time:
        t1 = time.perf_counter()
        describe(patches[:1])
        single = time.perf_counter() - t1
        print(f"batch_seconds={elapsed:.6g}")
        print(f"per_patch_seconds={elapsed / len(desc):.6g}")
        print(f"single_patch_seconds={single:.6g}")


def cmd_vocab(args):
    if args.vocab_cmd == "build":
        desc = descfile.read_descriptors(args.descriptors)
        tree = vocab.build_vocabulary(desc, args.k, args.depth, args.seed)
        vocab.save_vocab(tree, args.out)
        print(f"nodes={len(tree.parent)} words={tree.num_words}")
    elif args.vocab_cmd == "quantize":
        tree = vocab.load_vocab(args.vocab)
        words, _ = vocab.quantize_many(tree, descfile.read_descriptors(args.descriptors))
        text = "".join(f"{w}\n" for w in words.tolist())
        if args.out:
            with open(args.out + ".tmp", "w") as fh:
                fh.write(text)
            os.replace(args.out + ".tmp", args.out)
        else:
            sys.stdout.write(text)
    else:
        tree = vocab.load_vocab(args.vocab)
        va = vocab.bow_vector(tree, descfile.read_descriptors(args.frameA))
        vb = vocab.bow_vector(tree, descfile.read_descriptors(args.frameB))
        print(f"{vocab.similarity(va, vb):.12g}")


def cmd_eval(args):
    ds = patchio.read_dataset(args.dataset)
    describe, desc_id = _describer(args)
    desc = describe(patchio.normalize_patches(ds.patches))
    report = evalkit.evaluate_dataset(args.task, desc, ds, seed=args.seed, ratio=args.ratio,
                                      dataset_id=os.path.basename(args.dataset), descriptor_id=desc_id)
    text = report.to_text()
    if args.report:
        with open(args.report + ".tmp", "w") as fh:
            fh.write(text)
        os.replace(args.report + ".tmp", args.report)
    for k, v in report.summary().items():
        print(f"{k}={v}")


def cmd_gradcheck(args):
    res = network_gradcheck(args.seed, args.batch, args.samples)
    print(f"checked={res.checked} kink_skipped={res.kinks} max_relative_error={res.max_error:.6e}")
    if res.checked == 0 or res.kinks > 0.05 * res.total:
        raise NumericError(f"{res.kinks} of {res.total} probes crossed a kink; check is inconclusive")
    if not res.max_error < args.tol:
        raise NumericError(f"max relative error {res.max_error:.3e} exceeds {args.tol:g}")


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="deepdesc", description="Learned local descriptors: data, training, vocabulary, evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("detect", help="FAST keypoints of a PGM image")
    d.add_argument("--image", required=True)
    d.add_argument("--threshold", type=int, default=20)
    d.add_argument("--grid", type=_grid, default=(4, 4), help="CxR grid (default 4x4)")
    d.add_argument("--per-cell", type=int, default=8)
    d.add_argument("--no-nms", action="store_true")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    m = sub.add_parser("make-dataset", help="build a DFPD patch dataset")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="directory of PGM images")
    src.add_argument("--synthetic", type=int, metavar="N", help="N generated labels")
    m.add_argument("--views", type=int, default=2)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--max-rotation", type=float, default=20.0)
    m.add_argument("--threshold", type=int, default=20)
    m.add_argument("--grid", type=_grid, default=(4, 4))
    m.add_argument("--per-cell", type=int, default=4)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_dataset)

    t = sub.add_parser("train", help="train the descriptor network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--wd", type=float, default=0.0001)
    t.add_argument("--margin", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mining", choices=("hard", "random"), default="hard")
    t.add_argument("--log", help="also append epoch lines to this file")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("describe", help="compute descriptors (DFDS)")
    s.add_argument("--model")
    s.add_argument("--baseline", action="store_true")
    s.add_argument("--dataset")
    s.add_argument("--image")
    s.add_argument("--keypoints")
    s.add_argument("--out", required=True)
    s.add_argument("--time", action="store_true")
    s.set_defaults(func=cmd_describe)

    v = sub.add_parser("vocab", help="vocabulary tree tools")
    vsub = v.add_subparsers(dest="vocab_cmd", required=True, parser_class=_Parser)
    vb = vsub.add_parser("build")
    vb.add_argument("--descriptors", required=True)
    vb.add_argument("--k", type=int, default=10)
    vb.add_argument("--depth", type=int, default=3)
    vb.add_argument("--seed", type=int, default=0)
    vb.add_argument("--out", required=True)
    vq = vsub.add_parser("quantize")
    vq.add_argument("--vocab", required=True)
    vq.add_argument("--descriptors", required=True)
    vq.add_argument("--out")
    vs = vsub.add_parser("score")
    vs.add_argument("--vocab", required=True)
    vs.add_argument("--frameA", required=True)
    vs.add_argument("--frameB", required=True)
    v.set_defaults(func=cmd_vocab)

    e = sub.add_parser("eval", help="verification / matching / retrieval benchmark")
    e.add_argument("--task", required=True, choices=("verification", "matching", "retrieval"))
    e.add_argument("--model")
    e.add_argument("--baseline", action="store_true")
    e.add_argument("--dataset", required=True)
    e.add_argument("--ratio", type=float, default=0.8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the training gradient")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--samples", type=int, default=64, help="coordinates per parameter array")
    g.add_argument("--tol", type=float, default=1e-6)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, ConstraintError, DegenerateInputError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
