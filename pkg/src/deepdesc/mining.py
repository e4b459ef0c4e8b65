"""Hardest-in-batch negative mining, margin loss and the SGD training loop.

For a batch of N matched (anchor, positive) descriptor pairs the distance
matrix ``D[i, j] = |a_i - p_j|`` is computed. For row i the hardest negative
distance is the smaller of the nearest non-matching positive to ``a_i``
(row minimum over ``j != i``) and the nearest non-matching anchor to ``p_i``
(column minimum over ``k != i``). The loss is the mean hinge
``max(0, margin + D[i, i] - d_neg[i])``.
"""
import logging
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import DegenerateBatchError, DimensionError, NumericError
from .numkit import SGDState, sgd_step
from .patchio import sample_batch

logger = logging.getLogger(__name__)


@dataclass
class MiningResult:
    neg_dist: np.ndarray  # (N,) chosen negative distance d_n
    neg_index: np.ndarray  # (N,) column (row side) or row (column side) index
    from_row: np.ndarray  # (N,) bool, True when the row minimum won
    row_min: np.ndarray | None = None  # a_kmin
    row_arg: np.ndarray | None = None
    col_min: np.ndarray | None = None  # p_jmin
    col_arg: np.ndarray | None = None


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    margin: float = 1.0
    mining: str = "hard"

    def __post_init__(self):
        if self.batch_size < 2:
            raise DegenerateBatchError("batch_size must be >= 2")
        if min(self.lr, self.momentum, self.weight_decay) < 0 or self.margin <= 0:
            raise ValueError("hyperparameters must be nonnegative and margin positive")
        if self.mining not in ("hard", "random"):
            raise ValueError(f"unknown mining strategy {self.mining!r}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    active_fraction: float
    seconds: float = field(compare=False)

    def log_line(self):
        return f"{self.epoch}\t{self.mean_loss:.6f}\t{self.active_fraction:.6f}\t{self.seconds:.3f}"


def pairwise_distance_matrix(anchors, positives):
    """``D[i, j] = |a_i - p_j|``, i.e. ``sqrt(2 - 2 <a_i, p_j>)`` for unit-norm rows.

    The difference form is evaluated directly: the inner-product form loses
    about half the significant digits for near-identical pairs.
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.ndim != 2 or p.ndim != 2 or a.shape[1] != p.shape[1]:
        raise DimensionError(f"descriptor sets {a.shape} and {p.shape} are incompatible")
    diff = a[:, None, :] - p[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def hardest_negatives(d) -> MiningResult:
    """Hardest non-matching distance per row (anchor swap).

    Ties pick the smallest index; between an equal row and column minimum
    the row side wins.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionError(f"distance matrix must be square, got {d.shape}")
    n = d.shape[0]
    if n < 2:
        raise DegenerateBatchError("hard negative mining needs at least 2 pairs")
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    rows = np.arange(n)
    row_arg = masked.argmin(axis=1)
    col_arg = masked.argmin(axis=0)
    row_min = masked[rows, row_arg]
    col_min = masked[col_arg, rows]
    from_row = row_min <= col_min
    return MiningResult(
        neg_dist=np.where(from_row, row_min, col_min),
        neg_index=np.where(from_row, row_arg, col_arg),
        from_row=from_row,
        row_min=row_min, row_arg=row_arg, col_min=col_min, col_arg=col_arg,
    )


def random_negatives(d, rng) -> MiningResult:
    """Uniformly sampled non-matching positive for every anchor."""
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if n < 2:
        raise DegenerateBatchError("negative sampling needs at least 2 pairs")
    j = rng.integers(0, n - 1, size=n)
    j = j + (j >= np.arange(n))  # skip the diagonal
    return MiningResult(neg_dist=d[np.arange(n), j], neg_index=j, from_row=np.ones(n, dtype=bool))


def negative_entries(mining):
    """(row, col) positions in D of the selected negatives."""
    rows = np.arange(len(mining.neg_index))
    r = np.where(mining.from_row, rows, mining.neg_index)
    c = np.where(mining.from_row, mining.neg_index, rows)
    return r, c


def triplet_margin_loss(d, mining, margin=1.0):
    """Mean hinge loss and its gradient with respect to every entry of D."""
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n) or len(mining.neg_dist) != n:
        raise DimensionError("mining result does not match the distance matrix")
    r, c = negative_entries(mining)
    terms = margin + np.diag(d) - d[r, c]
    active = terms > 0
    loss = float(np.where(active, terms, 0.0).sum() / n)
    grad = np.zeros_like(d)
    idx = np.flatnonzero(active)
    np.add.at(grad, (idx, idx), 1.0 / n)
    np.add.at(grad, (r[idx], c[idx]), -1.0 / n)
    return loss, grad


def distance_backward(anchors, positives, d, grad_d):
    """Chain ``dL/dD`` back to the anchor and positive descriptors.

    ``dD_ij/da_i = (a_i - p_j) / D_ij`` and ``dD_ij/dp_j = -(a_i - p_j) / D_ij``;
    entries with ``D_ij == 0`` carry no gradient.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(d > 0, grad_d / d, 0.0)
    ga = anchors * w.sum(axis=1)[:, None] - w @ positives
    gp = positives * w.sum(axis=0)[:, None] - w.T @ anchors
    return ga, gp


def batch_loss(model, batch, config, rng=None, with_grad=True):
    """Forward (and optionally backward) pass on one triplet batch.

    Returns ``(loss, active_fraction, grads)``; ``grads`` follows
    ``model.params`` order and is ``None`` without ``with_grad``.
    """
    n = len(batch.labels)
    x = np.concatenate([batch.anchors, batch.positives])
    desc, caches = net.forward(model, x)
    a, p = desc[:n], desc[n:]
    d = pairwise_distance_matrix(a, p)
    if config.mining == "hard":
        mining = hardest_negatives(d)
    else:
        mining = random_negatives(d, rng)
    loss, grad_d = triplet_margin_loss(d, mining, config.margin)
    active = float(np.mean(config.margin + np.diag(d) - mining.neg_dist > 0))
    if not with_grad:
        return loss, active, None
    ga, gp = distance_backward(a, p, d, grad_d)
    # both branches share weights: one backward over the stacked batch sums them
    grads = net.backward(model, caches, np.concatenate([ga, gp]))
    return loss, active, grads


def train_epoch(model, dataset, config, rng, state=None, epoch=1):
    """One pass of ``num_labels // batch_size`` sampled batches; updates ``model``."""
    if dataset.num_labels < config.batch_size:
        raise DegenerateBatchError(
            f"dataset has {dataset.num_labels} labels, batch needs {config.batch_size}")
    if state is None:
        state = SGDState(config.lr, config.momentum, config.weight_decay)
    n_batches = dataset.num_labels // config.batch_size
    start = time.perf_counter()
    losses, actives = [], []
    params = model.params
    for b in range(n_batches):
        batch = sample_batch(dataset, config.batch_size, rng)
        loss, active, grads = batch_loss(model, batch, config, rng)
        try:
            sgd_step(params, grads, state)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
        losses.append(loss)
        actives.append(active)
    return EpochStats(epoch, float(np.mean(losses)), float(np.mean(actives)),
                      time.perf_counter() - start)


def train(model, dataset, config, log_file=None, stream=sys.stdout):
    """Run ``config.epochs`` epochs; one tab-separated log line per epoch."""
    rng = np.random.default_rng(config.seed)
    state = SGDState(config.lr, config.momentum, config.weight_decay)
    history = []
    for epoch in range(1, config.epochs + 1):
        stats = train_epoch(model, dataset, config, rng, state, epoch)
        history.append(stats)
        line = stats.log_line()
        if stream is not None:
            print(line, file=stream, flush=True)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
    return history
