"""Hierarchical k-means vocabulary over float descriptors and tf-idf BoW scoring.

Centroids are stored at float32 precision in memory as well as on disk, so a
saved and reloaded tree quantises every descriptor exactly as before. Leaf
centroids are additionally adjusted at the ulp level so their float64 norm
is 1 to ~1e-11 despite the float32 storage.
"""
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, atomic_write, pack_f32, pack_u32, read_bytes
from .errors import ConstraintError, FormatError

logger = logging.getLogger(__name__)

NO_PARENT = 0xFFFFFFFF


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    sse_history: list
    truncated: bool = False  # fewer than k distinct points: one centroid each


def _sq_distances(points, centroids):
    d = np.empty((len(points), len(centroids)))
    for c, centroid in enumerate(centroids):
        diff = points - centroid
        d[:, c] = np.einsum("ij,ij->i", diff, diff)
    return d


def _plusplus(points, k, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            break
        idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(points, points[idx:idx + 1])[:, 0])
    return points[chosen].copy()


def kmeans(points, k, max_iters=50, seed=0):
    """k-means++ seeding followed by Lloyd iterations.

    Stops when assignments no longer change or after ``max_iters``. An empty
    cluster is re-seeded at the point farthest from its current centroid.
    ``sse_history`` holds the within-cluster SSE after every assignment and
    update step. When there are at most ``k`` distinct points, those points
    are returned as the centroids and ``truncated`` is set.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ConstraintError("kmeans needs a nonempty (n, d) point array")
    if k < 1:
        raise ConstraintError("k must be >= 1")
    distinct, first = np.unique(x, axis=0, return_index=True)
    if len(distinct) <= k:
        cents = x[np.sort(first)]
        d = _sq_distances(x, cents)
        assign = d.argmin(axis=1)
        sse = float(d[np.arange(len(x)), assign].sum())
        if len(distinct) < k:
            logger.info("kmeans: only %d distinct points for k=%d", len(distinct), k)
        return KMeansResult(cents, assign, [sse], truncated=len(distinct) < k)
    rng = np.random.default_rng(seed)
    cents = _plusplus(x, k, rng)
    assign = None
    history = []
    for _ in range(max_iters):
        d = _sq_distances(x, cents)
        new = d.argmin(axis=1)
        sse_assign = float(d[np.arange(len(x)), new].sum())
        history.append(sse_assign)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(len(cents)):
            members = assign == c
            if members.any():
                cents[c] = x[members].mean(axis=0)
        # repair clusters left empty by the assignment
        for c in range(len(cents)):
            if not (assign == c).any():
                dist = _sq_distances(x, cents)[np.arange(len(x)), assign]
                far = int(dist.argmax())
                cents[c] = x[far]
                assign[far] = c
        d = _sq_distances(x, cents)
        history.append(float(d[np.arange(len(x)), assign].sum()))
    else:
        d = _sq_distances(x, cents)
        assign = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), assign].sum()))
    return KMeansResult(cents, assign, history)


def unit_f32(vec, tol=1e-11):
    """float32-representable vector whose float64 norm is 1 within ``tol``.

    Starts from the rounded normalised vector and nudges single components
    by one ulp (largest step that does not overshoot) until the squared
    norm is within tolerance.
    """
    v = np.asarray(vec, dtype=np.float64)
    c = (v / np.linalg.norm(v)).astype(np.float32)
    for _ in range(200):
        c64 = c.astype(np.float64)
        err = float(c64 @ c64) - 1.0
        if abs(err) <= tol:
            break
        direction = -np.sign(err)
        toward = np.where(c64 >= 0, direction, -direction).astype(np.float32)
        stepped = np.nextafter(c, c + toward * np.float32(np.inf))
        delta = stepped.astype(np.float64) ** 2 - c64 ** 2
        gain = -np.sign(err) * delta  # reduction of |err| if applied alone
        ok = (gain > 0) & (gain <= 2 * abs(err))
        if not ok.any():
            break
        i = int(np.argmax(np.where(ok, gain, -np.inf)))
        c[i] = stepped[i]
    return c.astype(np.float64)


@dataclass
class VocabularyTree:
    k: int
    depth: int
    dim: int
    parent: list = field(default_factory=list)
    children: list = field(default_factory=list)
    centroids: list = field(default_factory=list)
    word_of_node: dict = field(default_factory=dict)  # leaf node -> word id
    idf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    leaf_nodes: list = field(default_factory=list)  # word id -> node

    @property
    def num_words(self):
        return len(self.leaf_nodes)

    def is_leaf(self, node):
        return not self.children[node]

    def _add(self, parent, centroid):
        self.parent.append(parent)
        self.children.append([])
        self.centroids.append(np.asarray(centroid, dtype=np.float64))
        node = len(self.parent) - 1
        if parent != NO_PARENT:
            self.children[parent].append(node)
        return node


def _f32(v):
    return np.asarray(v, dtype=np.float32).astype(np.float64)


def build_vocabulary(descriptors, k=10, depth=3, seed=0, max_iters=50):
    """Vocabulary tree by recursive k-means (breadth-first).

    A node is split until ``depth`` levels exist below the root or it holds
    at most ``k`` descriptors. Leaf centroids are unit-normalised; idf is
    ``max(0, ln(N / (1 + n_word)))`` from the training descriptors.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ConstraintError("vocabulary needs a nonempty descriptor set")
    if k < 2 or depth < 1:
        raise ConstraintError("need k >= 2 and depth >= 1")
    tree = VocabularyTree(k, depth, x.shape[1])
    root = tree._add(NO_PARENT, _f32(x.mean(axis=0)))
    queue = deque([(root, np.arange(len(x)), 0)])
    while queue:
        node, idx, level = queue.popleft()
        if level > 0 and (level == depth or len(idx) <= k):
            tree.centroids[node] = unit_f32(tree.centroids[node])
            continue
        res = kmeans(x[idx], k, max_iters, seed=[seed, node])
        for c, centroid in enumerate(res.centroids):
            members = idx[res.assignments == c]
            if len(members) == 0:
                continue
            child = tree._add(node, _f32(centroid))
            queue.append((child, members, level + 1))
    # breadth-first order makes word ids level-then-sibling ordered
    tree.leaf_nodes = [n for n in range(len(tree.parent)) if tree.is_leaf(n)]
    tree.word_of_node = {n: w for w, n in enumerate(tree.leaf_nodes)}
    counts = np.bincount(quantize_many(tree, x, with_idf=False), minlength=tree.num_words)
    tree.idf = _f32(np.maximum(0.0, np.log(len(x) / (1.0 + counts))))
    return tree


def quantize(tree, descriptor):
    """Greedy descent to a leaf; returns ``(word_id, idf)``.

    At every level the child with the smallest Euclidean distance wins, the
    lowest child index on ties.
    """
    d = np.asarray(descriptor, dtype=np.float64).reshape(1, -1)
    words, idf = quantize_many(tree, d)
    return int(words[0]), float(idf[0])


def quantize_many(tree, descriptors, with_idf=True):
    """Vectorised greedy descent; word ids (and idf weights) for every row."""
    x = np.asarray(descriptors, dtype=np.float64)
    nodes = np.zeros(len(x), dtype=np.intp)
    active = np.ones(len(x), dtype=bool)
    while active.any():
        for node in np.unique(nodes[active]):
            kids = tree.children[node]
            rows = np.flatnonzero(active & (nodes == node))
            if not kids:
                active[rows] = False
                continue
            d = _sq_distances(x[rows], np.stack([tree.centroids[c] for c in kids]))
            nodes[rows] = np.asarray(kids)[d.argmin(axis=1)]
    words = np.array([tree.word_of_node[n] for n in nodes], dtype=np.intp)
    if with_idf:
        return words, tree.idf[words]
    return words


def bow_vector(tree, descriptors):
    """L1-normalised idf-weighted word histogram ``{word_id: weight}``.

    Returns an empty dict (and logs a warning) when every word hit carries
    zero idf.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ConstraintError("bow_vector needs at least one descriptor")
    words, weights = quantize_many(tree, x)
    acc = {}
    for w, wt in zip(words.tolist(), weights.tolist()):
        acc[w] = acc.get(w, 0.0) + wt
    total = sum(acc.values())
    if total <= 0:
        logger.warning("bow_vector: all words have zero idf; returning an empty vector")
        return {}
    return {w: v / total for w, v in sorted(acc.items()) if v > 0}


def similarity(v1, v2):
    """``1 - 0.5 * sum_w |v1[w] - v2[w]|``; 0 (with a warning) for empty input."""
    if not v1 or not v2:
        logger.warning("similarity: empty BoW vector")
        return 0.0
    l1 = 0.0
    for w in set(v1) | set(v2):
        l1 += abs(v1.get(w, 0.0) - v2.get(w, 0.0))
    return min(1.0, max(0.0, 1.0 - 0.5 * l1))


# ---------------------------------------------------------------- DFVC files

def serialize_vocab(tree) -> bytes:
    parts = [b"DFVC", pack_u32(1, tree.k, tree.depth, tree.dim, len(tree.parent))]
    for n in range(len(tree.parent)):
        kids = tree.children[n]
        parts.append(pack_u32(tree.parent[n], len(kids), *kids))
        leaf = not kids
        parts.append(bytes([1 if leaf else 0]))
        parts.append(pack_f32(tree.centroids[n]))
        if leaf:
            w = tree.word_of_node[n]
            parts.append(pack_u32(w) + pack_f32([tree.idf[w]]))
    return b"".join(parts)


def deserialize_vocab(data: bytes) -> VocabularyTree:
    r = Reader(data)
    r.magic(b"DFVC")
    r.version(1)
    k, depth, dim, count = (r.u32(w) for w in ("k", "depth", "dim", "node count"))
    tree = VocabularyTree(k, depth, dim)
    words = {}
    seen = set()
    for n in range(count):
        at = r.pos
        parent = r.u32("parent")
        if parent != NO_PARENT and parent >= count:
            raise FormatError(f"node {n}: parent {parent} out of range", at)
        nkids = r.u32("child count")
        kids = [r.u32("child index") for _ in range(nkids)]
        if any(c >= count for c in kids):
            raise FormatError(f"node {n}: child index out of range", at)
        at = r.pos
        leaf = r.u8("leaf flag")
        if leaf not in (0, 1) or bool(leaf) == bool(kids):
            raise FormatError(f"node {n}: inconsistent leaf flag {leaf}", at)
        tree.parent.append(parent)
        tree.children.append(kids)
        tree.centroids.append(r.f32(dim, "centroid"))
        if leaf:
            at = r.pos
            w = r.u32("word id")
            idf = r.f32(1, "idf")[0]
            if w in seen:
                raise FormatError(f"duplicate word id {w}", at)
            seen.add(w)
            words[n] = (w, idf)
    r.finish()
    ids = sorted(w for w, _ in words.values())
    if ids != list(range(len(ids))):
        raise FormatError("word ids are not 0..W-1")
    tree.word_of_node = {n: w for n, (w, _) in words.items()}
    tree.leaf_nodes = [None] * len(ids)
    idf = np.zeros(len(ids))
    for n, (w, v) in words.items():
        tree.leaf_nodes[w] = n
        idf[w] = v
    tree.idf = idf
    return tree


def save_vocab(tree, path):
    atomic_write(path, serialize_vocab(tree))


def load_vocab(path) -> VocabularyTree:
    return deserialize_vocab(read_bytes(path))
