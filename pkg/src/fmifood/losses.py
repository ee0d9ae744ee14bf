"""Soft cross-entropy contrastive loss and the categorical batch objective.

The contrastive side admits multiple positives per row: the indicator mask
marks every same-class image-text pair in the batch as positive, and each
positive contributes its own log-softmax term.  The categorical side is a
standard cross-entropy of every image against the score of all C label
captions, so classes absent from the batch still act as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ValidationError


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the contrastive and categorical terms."""

    contrastive: float = 0.75
    categorical: float = 0.25

    def __post_init__(self):
        if not (0.0 <= self.contrastive <= 1.0 and 0.0 <= self.categorical <= 1.0):
            raise ValidationError("loss weights must lie in [0, 1]")
        if self.contrastive + self.categorical <= 0.0:
            raise ValidationError("at least one loss weight must be positive")


@dataclass
class BatchScoreSet:
    """Similarity logits for one batch.

    s_it[k][j] scores image k against text j; s_ti[j][k] scores text j
    against image k (equal to s_it.T whenever the pair scorer is
    direction-symmetric).  s_label[k][l] scores image k against the caption
    of category l and always spans all C categories.  temperature is the
    logit multiplier applied inside every softmax; keep it a tensor to let
    gradients reach a learnable scale.
    """

    s_it: torch.Tensor  # [b, b]
    s_ti: torch.Tensor  # [b, b]
    s_label: torch.Tensor | None = None  # [b, C]
    temperature: torch.Tensor | float = 1.0

    def __post_init__(self):
        if self.s_it.ndim != 2 or self.s_it.shape[0] != self.s_it.shape[1]:
            raise ValidationError("s_it must be a square [b, b] matrix")
        if self.s_ti.shape != self.s_it.shape:
            raise ValidationError("s_ti must match s_it's shape")
        if self.s_label is not None and self.s_label.shape[0] != self.s_it.shape[0]:
            raise ValidationError("s_label must have one row per batch image")
        if float(self.temperature) <= 0.0:
            raise ValidationError("temperature must be positive")

    @property
    def batch_size(self) -> int:
        return int(self.s_it.shape[0])


@dataclass
class PositivePairMask:
    """Binary indicator of which image-text pairs share a class."""

    q: torch.Tensor  # [b, b]
    labels: torch.Tensor  # [b] int

    def __post_init__(self):
        if self.q.shape != (self.labels.shape[0], self.labels.shape[0]):
            raise ValidationError("q must be [b, b] for b labels")
        expected = (self.labels[:, None] == self.labels[None, :])
        if not torch.equal(self.q.to(torch.bool), expected):
            raise ValidationError("q must mark exactly the same-label pairs")
        if not bool(self.q.any(dim=1).all()):
            raise ValidationError("every image needs at least one positive text")

    @classmethod
    def from_labels(cls, labels: torch.Tensor) -> "PositivePairMask":
        labels = labels.to(torch.long)
        q = (labels[:, None] == labels[None, :]).to(torch.float64)
        return cls(q=q, labels=labels)


def _target_weights(q: torch.Tensor, normalize_q: bool) -> torch.Tensor:
    if not normalize_q:
        return q
    return q / q.sum(dim=1, keepdim=True)


def image_to_text_loss(
    scores: BatchScoreSet, mask: PositivePairMask, normalize_q: bool = False
) -> torch.Tensor:
    """Sum over images of the per-image soft cross-entropy.

    Each image k pays -(1/b) * sum_j q[k][j] * log softmax_j of its text
    logits; q is the raw indicator unless normalize_q spreads each row's
    mass uniformly over its positives.
    """
    b = scores.batch_size
    if mask.q.shape[0] != b:
        raise ValidationError("mask batch size must match the score set")
    logits = scores.temperature * scores.s_it
    log_probs = F.log_softmax(logits, dim=1)
    weights = _target_weights(mask.q.to(log_probs.dtype), normalize_q)
    return -(weights * log_probs).sum() / b


def text_to_image_loss(
    scores: BatchScoreSet, mask: PositivePairMask, normalize_q: bool = False
) -> torch.Tensor:
    """Transpose analogue: each text normalizes over the batch images."""
    b = scores.batch_size
    if mask.q.shape[0] != b:
        raise ValidationError("mask batch size must match the score set")
    logits = scores.temperature * scores.s_ti
    log_probs = F.log_softmax(logits, dim=1)
    weights = _target_weights(mask.q.T.to(log_probs.dtype), normalize_q)
    return -(weights * log_probs).sum() / b


def contrastive_loss(
    scores: BatchScoreSet, mask: PositivePairMask, normalize_q: bool = False
) -> torch.Tensor:
    """Half the sum of both directional losses."""
    i2t = image_to_text_loss(scores, mask, normalize_q)
    t2i = text_to_image_loss(scores, mask, normalize_q)
    return (i2t + t2i) / 2


def categorical_loss(scores: BatchScoreSet, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of each image against all C category captions."""
    if scores.s_label is None:
        raise ValidationError("score set carries no label scores")
    labels = labels.to(torch.long)
    n_categories = scores.s_label.shape[1]
    if bool((labels < 0).any()) or bool((labels >= n_categories).any()):
        raise ValidationError(f"labels must lie in [0, {n_categories})")
    logits = scores.temperature * scores.s_label
    log_probs = F.log_softmax(logits, dim=1)
    picked = log_probs.gather(1, labels[:, None]).squeeze(1)
    return -picked.mean()


def total_loss(
    l_con: torch.Tensor | float, l_cat: torch.Tensor | float, weights: LossWeights
) -> torch.Tensor | float:
    """Weighted sum of the two objectives."""
    return weights.contrastive * l_con + weights.categorical * l_cat
