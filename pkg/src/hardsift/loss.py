"""Training losses and their score-space gradients.

Pairwise ranking loss: -log sigmoid(y_pos - y_neg), computed through
logaddexp so huge margins stay finite. Pointwise loss: binary cross-entropy
on the raw score through an internal logistic squash, again in stable
logit form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import backbone
from .errors import ValidationError

PAIRWISE = "pairwise"
POINTWISE = "pointwise"
MODES = (PAIRWISE, POINTWISE)


def bpr_loss(y_pos, y_neg):
    """-log sigmoid(y_pos - y_neg), elementwise on arrays."""
    return np.logaddexp(0.0, -(np.asarray(y_pos, dtype=float) - np.asarray(y_neg, dtype=float)))


def bpr_grad(y_pos, y_neg):
    """dLoss/dy_pos; the y_neg gradient is its negation."""
    return expit(np.asarray(y_pos, dtype=float) - np.asarray(y_neg, dtype=float)) - 1.0


def bce_loss(raw, label):
    """Cross-entropy of sigmoid(raw) against a 0/1 label, in logit form."""
    raw = np.asarray(raw, dtype=float)
    label = np.asarray(label, dtype=float)
    return label * np.logaddexp(0.0, -raw) + (1.0 - label) * np.logaddexp(0.0, raw)


def bce_grad(raw, label):
    return expit(np.asarray(raw, dtype=float)) - np.asarray(label, dtype=float)


@dataclass
class TrainSample:
    """One training instance. Pairwise samples carry a positive and its
    fixed negative; pointwise samples carry one item and a 0/1 label.
    Score fields are filled in by batch_losses."""

    mode: str
    user: int
    pos_item: int | None = None
    neg_item: int | None = None
    item: int | None = None
    label: int | None = None
    pos_score: float | None = None
    neg_score: float | None = None
    score: float | None = None


class Batch:
    """Array-backed batch. Iterating or indexing yields TrainSample views,
    but the trainer works on the arrays directly."""

    def __init__(self, mode: str, users: np.ndarray, pos_items: np.ndarray | None = None,
                 neg_items: np.ndarray | None = None, items: np.ndarray | None = None,
                 labels: np.ndarray | None = None):
        if mode not in MODES:
            raise ValidationError(f"unknown mode {mode!r}")
        if mode == PAIRWISE and (pos_items is None or neg_items is None):
            raise ValidationError("pairwise batch needs pos_items and neg_items")
        if mode == POINTWISE and (items is None or labels is None):
            raise ValidationError("pointwise batch needs items and labels")
        self.mode = mode
        self.users = users
        self.pos_items = pos_items
        self.neg_items = neg_items
        self.items = items
        self.labels = labels
        self.pos_scores: np.ndarray | None = None
        self.neg_scores: np.ndarray | None = None
        self.scores: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def sample(self, k: int) -> TrainSample:
        if self.mode == PAIRWISE:
            return TrainSample(
                mode=self.mode,
                user=int(self.users[k]),
                pos_item=int(self.pos_items[k]),
                neg_item=int(self.neg_items[k]),
                pos_score=None if self.pos_scores is None else float(self.pos_scores[k]),
                neg_score=None if self.neg_scores is None else float(self.neg_scores[k]),
            )
        return TrainSample(
            mode=self.mode,
            user=int(self.users[k]),
            item=int(self.items[k]),
            label=int(self.labels[k]),
            score=None if self.scores is None else float(self.scores[k]),
        )

    def __iter__(self):
        return (self.sample(k) for k in range(len(self)))

    def positive_pairs(self) -> list[tuple[int, int]]:
        """The (user, positive item) pair behind each sample; pointwise
        label-0 samples have no positive pair and yield None."""
        if self.mode == PAIRWISE:
            return [(int(u), int(i)) for u, i in zip(self.users, self.pos_items)]
        return [
            (int(u), int(i)) if lbl == 1 else None
            for u, i, lbl in zip(self.users, self.items, self.labels)
        ]


def batch_losses(model: backbone.Model, batch: Batch) -> np.ndarray:
    """Per-sample loss vector; caches the predictions on the batch so the
    gradient step and the variance tracker reuse them."""
    if batch.mode == PAIRWISE:
        batch.pos_scores = backbone.predict_pairs(model, batch.users, batch.pos_items)
        batch.neg_scores = backbone.predict_pairs(model, batch.users, batch.neg_items)
        return bpr_loss(batch.pos_scores, batch.neg_scores)
    batch.scores = backbone.predict_pairs(model, batch.users, batch.items)
    return bce_loss(batch.scores, batch.labels)
