"""Triplet loss, its symmetric two-direction form, and in-batch hard mining.

Distances are Euclidean. Mining picks, for each anchor a_i, the closest
non-matching sample from the opposite bank (and symmetrically for each
positive p_i), with ties broken toward the lowest index so runs are
reproducible.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgument


@dataclass
class MiningConfig:
    strategy: str = "hardest"   # hardest | random
    margin: float = 1.0
    duplicate_floor: float = 0.0

    def __post_init__(self):
        if self.strategy not in ("hardest", "random"):
            raise InvalidArgument(f"unknown mining strategy {self.strategy!r}")
        if self.margin <= 0:
            raise InvalidArgument("margin must be positive")
        if self.duplicate_floor < 0:
            raise InvalidArgument("duplicate_floor must be >= 0")


def pairwise_distances(a, b):
    """All-pairs Euclidean distance matrix D[i, j] = ||A_i - B_j||.

    Accepts tensors or arrays; given tensors the result is differentiable.
    Negative radicands from the expansion are clamped to zero.
    """
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a, b = ad.as_tensor(a), ad.as_tensor(b)
        if a.shape[1] != b.shape[1]:
            raise InvalidArgument("pairwise_distances: dimension mismatch")
        a2 = ad.vsum(ad.mul(a, a), axis=1, keepdims=True)
        b2 = ad.reshape(ad.vsum(ad.mul(b, b), axis=1), (1, -1))
        cross = ad.mul(ad.matmul(a, ad.transpose(b, (1, 0))), -2.0)
        return ad.safe_sqrt(ad.add(ad.add(a2, b2), cross))
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument("pairwise_distances: dimension mismatch")
    # explicit differences: exactly transpose-symmetric under a bank swap,
    # which hard mining relies on
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2)).astype(np.float32)


def mine_hard_negatives(dist, cfg):
    """Closest cross-bank negatives per row and per column of a distance matrix.

    Returns (idx_for_anchor, idx_for_positive): idx_for_anchor[i] is the
    j != i minimizing D[i, j]; idx_for_positive[i] the j != i minimizing
    D[j, i]. Entries below cfg.duplicate_floor are excluded; a row/column
    whose candidates are all excluded falls back to the floor-free argmin.
    """
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InvalidArgument("mining needs a square distance matrix")
    n = d.shape[0]
    if n < 2:
        raise InvalidArgument("mining needs at least 2 samples")

    def directional(mat):
        masked = mat.astype(np.float64).copy()
        np.fill_diagonal(masked, np.inf)
        no_floor = masked.argmin(axis=1)
        if cfg.duplicate_floor > 0:
            floored = np.where(masked < cfg.duplicate_floor, np.inf, masked)
            idx = floored.argmin(axis=1)
            dead = ~np.isfinite(floored.min(axis=1))
            idx[dead] = no_floor[dead]
            return idx
        return no_floor

    return directional(d), directional(d.T)


def triplet_loss(anchors, positives, neg_idx, margin):
    """Sum of hinge terms max(0, m + d(a_i, p_i) - d(a_i, p_neg[i]))."""
    anchors, positives = ad.as_tensor(anchors), ad.as_tensor(positives)
    n = anchors.shape[0]
    neg_idx = np.asarray(neg_idx, np.int64)
    if neg_idx.shape != (n,):
        raise InvalidArgument("need exactly one negative index per anchor")
    if neg_idx.min() < 0 or neg_idx.max() >= n:
        raise InvalidArgument("negative index out of range")
    if np.any(neg_idx == np.arange(n)):
        raise InvalidArgument("a negative index may not point at its own pair")
    d_pos = _row_distance(anchors, positives)
    d_neg = _row_distance(anchors, ad.index_select(positives, neg_idx))
    hinge = ad.relu(ad.add(ad.sub(d_pos, d_neg), margin))
    return ad.vsum(hinge)


def _row_distance(x, y):
    diff = ad.sub(x, y)
    return ad.safe_sqrt(ad.vsum(ad.mul(diff, diff), axis=1))


def symmetric_triplet_loss(x_desc, y_desc, cfg, seeds=(0, 1)):
    """Two-direction triplet loss over paired descriptor banks.

    Hard strategy mines both directions from the cross-bank distance matrix;
    random strategy draws one negative per row uniformly over j != i with
    one seeded generator per direction, so swapping both the banks and the
    seed pair reproduces the loss exactly.
    """
    x_desc, y_desc = ad.as_tensor(x_desc), ad.as_tensor(y_desc)
    n = x_desc.shape[0]
    if cfg.strategy == "hardest":
        d = pairwise_distances(x_desc.data, y_desc.data)
        idx_a, idx_p = mine_hard_negatives(d, cfg)
    else:
        idx_a = _random_negatives(n, seeds[0])
        idx_p = _random_negatives(n, seeds[1])
    anchor_side = triplet_loss(x_desc, y_desc, idx_a, cfg.margin)
    positive_side = triplet_loss(y_desc, x_desc, idx_p, cfg.margin)
    return ad.add(anchor_side, positive_side)


def _random_negatives(n, seed):
    if n < 2:
        raise InvalidArgument("need at least 2 pairs to draw negatives")
    draw = np.random.default_rng(seed).integers(0, n - 1, size=n)
    return draw + (draw >= np.arange(n))
