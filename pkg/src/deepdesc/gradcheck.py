"""End-to-end finite-difference check of the network's training gradient.

The training loss is only piecewise smooth: max-pool argmaxes, the mined
negatives and the active hinge terms are discrete choices. A central
difference is a valid gradient estimate only if none of those choices
changes between ``x - h`` and ``x + h``, so every probed coordinate is
checked for that and kink-crossing coordinates are reported separately
instead of being compared.
"""
from dataclasses import dataclass

import numpy as np

from . import net
from .mining import TrainConfig, batch_loss, hardest_negatives, pairwise_distance_matrix
from .numkit import MaxPool2, max_relative_error
from .patchio import TripletBatch, normalize_patches


@dataclass
class GradcheckResult:
    max_error: float
    checked: int
    kinks: int

    @property
    def total(self):
        return self.checked + self.kinks


def random_batch(rng, n):
    """``n`` triplets of smoothed random patches (distinct labels)."""
    raw = rng.standard_normal((2, n, 34, 34))
    smooth = (raw[..., :-2, :-2] + raw[..., 1:-1, 1:-1] + raw[..., 2:, 2:]) / 3.0
    anchors = normalize_patches(smooth[0])
    positives = normalize_patches(0.8 * smooth[0] + 0.6 * smooth[1])
    return TripletBatch(anchors, positives, np.arange(n))


def loss_and_pattern(model, batch, margin=1.0):
    """Hard-mining loss plus a bytes fingerprint of every discrete choice."""
    n = len(batch.labels)
    desc, caches = net.forward(model, np.concatenate([batch.anchors, batch.positives]))
    d = pairwise_distance_matrix(desc[:n], desc[n:])
    mres = hardest_negatives(d)
    terms = margin + np.diag(d) - mres.neg_dist
    loss = float(np.where(terms > 0, terms, 0.0).sum() / n)
    parts = [c[1].tobytes() for layer, c in zip(model.layers, caches) if isinstance(layer, MaxPool2)]
    parts += [mres.neg_index.tobytes(), mres.from_row.tobytes(), (terms > 0).tobytes()]
    return loss, b"".join(parts)


def network_gradcheck(seed=1, batch=4, per_array=64, step=1e-6):
    """Compare backprop with central differences on a random triplet batch.

    Coordinates are sampled from every parameter array (arrays with at most
    ``per_array`` entries are checked exhaustively). The error measure is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    rng = np.random.default_rng(seed)
    model = net.build_model(seed)
    tb = random_batch(rng, batch)
    cfg = TrainConfig(batch_size=max(batch, 2))
    _, _, grads = batch_loss(model, tb, cfg)
    _, base = loss_and_pattern(model, tb, cfg.margin)
    worst, checked, kinks = 0.0, 0, 0
    for p, g in zip(model.params, grads):
        if p.size <= per_array:
            idx = np.arange(p.size)
        else:
            idx = np.sort(rng.choice(p.size, size=per_array, replace=False))
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up, pat_up = loss_and_pattern(model, tb, cfg.margin)
            flat[i] = orig - step
            down, pat_down = loss_and_pattern(model, tb, cfg.margin)
            flat[i] = orig
            if pat_up != base or pat_down != base:
                kinks += 1
                continue
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, max_relative_error([gflat[i]], [numeric]))
            checked += 1
    return GradcheckResult(worst, checked, kinks)
