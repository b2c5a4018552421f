"""Metric-learning and classification losses over a cross-view batch.

The triplet term mines, per anchor, the farthest same-class sample seen
from the other view and the nearest different-class sample, then applies a
hinge at the margin; the classification term averages softmax cross-entropy
over the two branch heads.  The total objective is their plain sum with no
hidden weighting.  Mining happens on detached values; the loss itself is
assembled from differentiable ops so gradients flow to the selected
embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_DIST_EPS = 1e-16


@dataclass
class BatchLabels:
    """Per-sample class ids and view codes (0 = drone, 1 = satellite)."""

    class_ids: np.ndarray
    views: np.ndarray

    def __init__(self, class_ids, views):
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        self.views = np.asarray(views, dtype=np.int64)
        if self.class_ids.shape != self.views.shape or self.class_ids.ndim != 1:
            raise ValueError(
                f"class_ids and views must be equal-length 1-D, got {self.class_ids.shape} and {self.views.shape}"
            )

    def __len__(self) -> int:
        return self.class_ids.size


def _mine(data: np.ndarray, labels: BatchLabels) -> tuple[np.ndarray, np.ndarray]:
    n = data.shape[0]
    if len(labels) != n:
        raise ValueError(f"labels cover {len(labels)} samples, batch has {n}")
    diff = data[:, None, :] - data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    same = labels.class_ids[:, None] == labels.class_ids[None, :]
    cross_view = labels.views[:, None] != labels.views[None, :]
    pos_mask = same & cross_view
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~pos_mask.any(axis=1))[0])
        raise ValueError(
            f"sample {bad} (class {labels.class_ids[bad]}) has no same-class sample in the other view"
        )
    if not neg_mask.any(axis=1).all():
        raise ValueError("batch contains a single class; no negatives available")
    pos_idx = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg_idx = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    return pos_idx, neg_idx


def triplet_loss(v: ad.Tensor, labels: BatchLabels, margin: float = 0.3) -> ad.Tensor:
    """Batch-hard triplet loss with Euclidean distances, mean over anchors."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if v.ndim != 2:
        raise ValueError(f"embeddings must be [N,D], got {v.shape}")
    pos_idx, neg_idx = _mine(v.data, labels)

    def dist_to(idx):
        diff = ad.sub(v, ad.select_rows(v, idx))
        return ad.sqrt(ad.affine(ad.sum_last(ad.mul(diff, diff)), 1.0, _DIST_EPS))

    hinge = ad.relu(ad.affine(ad.sub(dist_to(pos_idx), dist_to(neg_idx)), 1.0, margin))
    return ad.mean_all(hinge)


def cross_entropy_loss(z_r: ad.Tensor, z_n: ad.Tensor, labels) -> ad.Tensor:
    """Mean of softmax cross-entropy over the two branch logits."""
    ce_r = ad.softmax_cross_entropy(z_r, labels)
    ce_n = ad.softmax_cross_entropy(z_n, labels)
    return ad.affine(ad.add(ce_r, ce_n), 0.5, 0.0)


class NonFiniteLossError(FloatingPointError, ValueError):
    """A loss term evaluated to NaN or infinity."""


def total_loss(triplet: ad.Tensor, ce: ad.Tensor) -> ad.Tensor:
    """Exact sum of the two loss components."""
    for name, t in (("triplet", triplet), ("cross-entropy", ce)):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteLossError(f"{name} loss is not finite: {t.data}")
    return ad.add(triplet, ce)


def batch_objective(
    v_r: ad.Tensor,
    v_n: ad.Tensor,
    z_r: ad.Tensor,
    z_n: ad.Tensor,
    labels: BatchLabels,
    margin: float = 0.3,
) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Assemble the training objective for one batch.

    The triplet term is computed per branch and averaged; returns
    (total, triplet_term, ce_term).
    """
    t_r = triplet_loss(v_r, labels, margin)
    t_n = triplet_loss(v_n, labels, margin)
    trip = ad.affine(ad.add(t_r, t_n), 0.5, 0.0)
    ce = cross_entropy_loss(z_r, z_n, labels.class_ids)
    return total_loss(trip, ce), trip, ce
