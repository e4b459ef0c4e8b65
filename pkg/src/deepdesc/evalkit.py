"""Descriptor matching and the verification / matching / retrieval benchmarks.

Average precision everywhere is the information-retrieval definition: the
mean, over relevant items, of the precision at the rank where each relevant
item appears. Rankings sort by ascending distance with a stable sort, so
equal distances keep input order.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintError, DegenerateInputError


@dataclass
class MatchResult:
    index_a: np.ndarray
    index_b: np.ndarray
    distance: np.ndarray
    ratio: np.ndarray
    rejected: int = 0

    def __len__(self):
        return len(self.index_a)


@dataclass
class EvalReport:
    task: str
    ap: float  # AP for verification, mAP otherwise
    fpr95: float | None = None
    per_query: list = field(default_factory=list)
    dataset: str = ""
    descriptor: str = ""
    extra: dict = field(default_factory=dict)

    def summary(self):
        out = {"task": self.task, "dataset": self.dataset, "descriptor": self.descriptor,
               "ap" if self.task == "verification" else "map": f"{self.ap:.12g}"}
        if self.fpr95 is not None:
            out["fpr95"] = f"{self.fpr95:.12g}"
        out["queries"] = str(len(self.per_query))
        for k, v in self.extra.items():
            out[k] = f"{v:.12g}" if isinstance(v, float) else str(v)
        return out

    def to_text(self):
        """TSV table of per-query values followed by a key=value block."""
        lines = ["query\tvalue"]
        lines += [f"{i}\t{v:.12g}" for i, v in enumerate(self.per_query)]
        lines.append("")
        lines += [f"{k}={v}" for k, v in self.summary().items()]
        return "\n".join(lines) + "\n"


def parse_report(text):
    """key=value block of a report written by :meth:`EvalReport.to_text`."""
    kv = {}
    for line in text.splitlines():
        if "=" in line and "\t" not in line:
            k, v = line.split("=", 1)
            kv[k] = v
    return kv


def euclidean_distances(a, b):
    """Exact pairwise Euclidean distances (no expansion), shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    step = max(1, 2_000_000 // max(1, len(b) * a.shape[1]))
    for s in range(0, len(a), step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def match_descriptors(set_a, set_b, ratio_threshold=0.8):
    """Nearest-neighbour matching of A into B with Lowe's ratio test.

    A match is kept iff ``d1 / d2 < ratio_threshold``. With a single
    candidate in B the ratio is recorded as 0 and the match is kept only
    for ``ratio_threshold == 1``. Two zero distances give ratio 1.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ConstraintError("match_descriptors needs two nonempty sets")
    if not 0 < ratio_threshold <= 1:
        raise ConstraintError("ratio_threshold must lie in (0, 1]")
    d = euclidean_distances(a, b)
    rows = np.arange(len(a))
    nn = d.argmin(axis=1)
    d1 = d[rows, nn]
    if len(b) == 1:
        ratio = np.zeros(len(a))
        keep = np.full(len(a), ratio_threshold == 1)
    else:
        rest = d.copy()
        rest[rows, nn] = np.inf
        d2 = rest.min(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(d2 > 0, d1 / d2, 1.0)
        keep = ratio < ratio_threshold
    return MatchResult(rows[keep], nn[keep], d1[keep], ratio[keep], int((~keep).sum()))


def average_precision(relevant_in_rank_order, n_relevant=None):
    """AP of a ranked 0/1 list; ``n_relevant`` defaults to its number of hits."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    total = int(rel.sum()) if n_relevant is None else n_relevant
    if total == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / total)


def fpr_at_95(distances, is_positive):
    """False-positive rate at the smallest distance threshold with TPR >= 0.95.

    Every pair with distance <= threshold counts as accepted, so tied
    distances are accepted together.
    """
    dist = np.asarray(distances, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    order = np.argsort(dist, kind="stable")
    tp = np.cumsum(pos[order])
    k = int(np.searchsorted(tp, np.ceil(0.95 * n_pos - 1e-9)))
    threshold = dist[order[k]]
    return float(np.sum((~pos) & (dist <= threshold)) / n_neg)


def eval_verification(dist_or_pairs, same=None, dataset="", descriptor=""):
    """Patch verification: rank pairs by distance, report AP and FPR95.

    Accepts either ``(distances, same_flags)`` or a list of
    ``(desc_a, desc_b, same_flag)`` tuples.
    """
    if same is None:
        pairs = list(dist_or_pairs)
        dist = np.array([np.linalg.norm(np.asarray(a, float) - np.asarray(b, float)) for a, b, _ in pairs])
        same = np.array([bool(s) for _, _, s in pairs])
    else:
        dist = np.asarray(dist_or_pairs, dtype=np.float64)
        same = np.asarray(same, dtype=bool)
    if same.all() or not same.any():
        raise ConstraintError("verification needs both positive and negative pairs")
    order = np.argsort(dist, kind="stable")
    ap = average_precision(same[order])
    return EvalReport("verification", ap, fpr_at_95(dist, same), [ap], dataset, descriptor,
                      {"pairs": len(dist), "positives": int(same.sum())})


def _check_bijective(ref_labels, tgt_labels):
    ref = np.asarray(ref_labels)
    tgt = np.asarray(tgt_labels)
    if len(np.unique(ref)) != len(ref) or len(np.unique(tgt)) != len(tgt):
        raise ConstraintError("matching ground truth must be one-to-one (duplicate labels)")
    if len(ref) != len(tgt) or not np.array_equal(np.sort(ref), np.sort(tgt)):
        raise ConstraintError("matching ground truth must be a bijection between sets")


def matching_ap(ref, ref_labels, tgt, tgt_labels):
    """AP of one reference/target pair of sets.

    Every reference descriptor proposes its nearest target; proposals are
    ranked by distance and a proposal is correct iff the labels agree. The
    number of relevant items is the size of the reference set.
    """
    _check_bijective(ref_labels, tgt_labels)
    d = euclidean_distances(ref, tgt)
    nn = d.argmin(axis=1)
    d1 = d[np.arange(len(ref)), nn]
    correct = np.asarray(tgt_labels)[nn] == np.asarray(ref_labels)
    order = np.argsort(d1, kind="stable")
    return average_precision(correct[order], n_relevant=len(ref))


def eval_matching(reference, ref_labels, targets, ratio_threshold=None, dataset="", descriptor=""):
    """mAP over target sets; ``targets`` is a list of ``(descriptors, labels)``."""
    if not targets:
        raise ConstraintError("matching needs at least one target set")
    aps = [matching_ap(reference, ref_labels, t, tl) for t, tl in targets]
    extra = {"targets": len(targets)}
    if ratio_threshold is not None:
        kept = [len(match_descriptors(reference, t, ratio_threshold)) / len(reference) for t, _ in targets]
        extra["ratio"] = float(ratio_threshold)
        extra["ratio_kept_fraction"] = float(np.mean(kept))
    return EvalReport("matching", float(np.mean(aps)), None, aps, dataset, descriptor, extra)


def eval_retrieval(queries, query_labels, gallery, gallery_labels, distractors=None,
                   dataset="", descriptor=""):
    """mAP of ranking gallery (+ distractors, appended after it) per query."""
    q_labels = np.asarray(query_labels)
    g_labels = np.asarray(gallery_labels)
    missing = set(q_labels.tolist()) - set(g_labels.tolist())
    if missing:
        raise ConstraintError(f"{len(missing)} query labels have no gallery item")
    pool = np.asarray(gallery, dtype=np.float64)
    if distractors is not None and len(distractors):
        pool = np.concatenate([pool, np.asarray(distractors, dtype=np.float64)])
    d = euclidean_distances(queries, pool)
    aps = []
    relevant = np.zeros(len(pool), dtype=bool)
    for i in range(len(q_labels)):
        relevant[:len(g_labels)] = g_labels == q_labels[i]
        order = np.argsort(d[i], kind="stable")
        aps.append(average_precision(relevant[order]))
    extra = {"gallery": len(g_labels), "distractors": len(pool) - len(g_labels)}
    return EvalReport("retrieval", float(np.mean(aps)), None, aps, dataset, descriptor, extra)


def baseline_raw_descriptor(patches):
    """8x8 block-mean thumbnail of a normalised 32x32 patch, unit norm, zero-padded to 128.

    Accepts one patch or an (N, 32, 32) stack and returns (128,) or (N, 128).
    """
    x = np.asarray(patches, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (32, 32):
        raise ConstraintError(f"baseline expects 32x32 patches, got {x.shape[1:]}")
    blocks = x.reshape(len(x), 8, 4, 8, 4).mean(axis=(2, 4)).reshape(len(x), 64)
    norm = np.sqrt(np.einsum("ij,ij->i", blocks, blocks))
    if np.any(norm < 1e-12):
        raise DegenerateInputError("baseline descriptor of a zero-variance patch")
    out = np.zeros((len(x), 128))
    out[:, :64] = blocks / norm[:, None]
    return out[0] if single else out


# ---------------------------------------------------------------- dataset tasks

def task_views(dataset):
    """First two record indices of every label (labels with 2+ views)."""
    uniq, groups = dataset.groups
    keep = [g for g in groups if len(g) >= 2]
    return np.array([g[0] for g in keep]), np.array([g[1] for g in keep]), uniq[[len(g) >= 2 for g in groups]]


def verification_pairs(n, seed, negatives_per_positive=1):
    """Index pairs into the (view0, view1) lists: all positives plus shifted negatives."""
    rng = np.random.default_rng(seed)
    pos = np.arange(n)
    neg_a, neg_b = [], []
    for _ in range(negatives_per_positive):
        shift = rng.integers(1, n, size=n)
        neg_a.append(pos)
        neg_b.append((pos + shift) % n)
    a = np.concatenate([pos] + neg_a)
    b = np.concatenate([pos] + neg_b)
    same = np.concatenate([np.ones(n, bool), np.zeros(n * negatives_per_positive, bool)])
    return a, b, same


def evaluate_dataset(task, descriptors, dataset, seed=0, ratio=0.8, negatives_per_positive=1,
                     dataset_id="", descriptor_id=""):
    """Run one benchmark task on descriptors of every record of ``dataset``."""
    desc = np.asarray(descriptors, dtype=np.float64)
    v0, v1, labels = task_views(dataset)
    if len(v0) < 2:
        raise ConstraintError("benchmark needs at least two labels with two views")
    if task == "verification":
        a, b, same = verification_pairs(len(v0), seed, negatives_per_positive)
        dist = np.linalg.norm(desc[v0[a]] - desc[v1[b]], axis=1)
        return eval_verification(dist, same, dataset_id, descriptor_id)
    if task == "matching":
        targets = [(desc[v1], labels)]
        return eval_matching(desc[v0], labels, targets, ratio, dataset_id, descriptor_id)
    if task == "retrieval":
        uniq, groups = dataset.groups
        g_idx = np.concatenate([g[1:] for g in groups if len(g) >= 2])
        return eval_retrieval(desc[v0], labels, desc[g_idx], dataset.labels[g_idx],
                              dataset=dataset_id, descriptor=descriptor_id)
    raise ConstraintError(f"unknown task {task!r}")
