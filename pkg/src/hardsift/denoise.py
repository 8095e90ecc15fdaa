"""The denoising core: loss-ranked flagging, variance-ranked candidate
pruning, threshold schedules and the final keep/drop bookkeeping.

Every mini-batch is partitioned into clean samples, flagged (noisy-looking)
samples, a variance-pruned candidate subset of the flagged ones, and the
candidates a scorer confirmed as genuinely hard. Training runs on
(batch minus flagged) union confirmed-hard. All schedules share one global
iteration counter T that advances once per mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone
from .errors import ValidationError


@dataclass(frozen=True)
class ScheduleConfig:
    """Knobs for the drop-count ramp, the pruning share and the score
    thresholds. alpha divides T everywhere, so smaller values ramp faster."""

    alpha: float = 3000
    eps_l_max: float = 0.05
    eps_v: float = 0.5
    eps_pos_max: float = 8.0
    eps_pos_min: float = 6.0
    eps_neg_max: float = 4.0
    eps_neg_min: float = 2.0
    eps_pair_max: float = 7.0
    eps_pair_min: float = 3.0
    m: int = 3
    eps_gamma: int = 3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")
        if not (0.0 <= self.eps_l_max <= 1.0):
            raise ValidationError("eps_l_max must be in [0, 1]")
        if not (0.0 <= self.eps_v <= 1.0):
            raise ValidationError("eps_v must be in [0, 1]")
        if self.eps_pos_min > self.eps_pos_max:
            raise ValidationError("eps_pos_min must not exceed eps_pos_max")
        if self.eps_neg_min > self.eps_neg_max:
            raise ValidationError("eps_neg_min must not exceed eps_neg_max")
        if self.eps_pair_min > self.eps_pair_max:
            raise ValidationError("eps_pair_min must not exceed eps_pair_max")
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        if self.eps_gamma < 1:
            raise ValidationError("eps_gamma must be >= 1")


def epsilon_l(t: int, cfg: ScheduleConfig, batch_size: int) -> int:
    """How many samples to flag at iteration t: floor of min(t/alpha,
    eps_l_max * batch_size). Grows from zero and saturates at the cap."""
    if t < 0:
        raise ValidationError("iteration counter must be >= 0")
    if batch_size < 0:
        raise ValidationError("batch_size must be >= 0")
    return int(min(t / cfg.alpha, cfg.eps_l_max * batch_size))


def epsilon_pos(t: int, cfg: ScheduleConfig) -> float:
    """Positive-rescue threshold, relaxing from eps_pos_max down to min."""
    return max(cfg.eps_pos_max - t / cfg.alpha, cfg.eps_pos_min)


def epsilon_neg(t: int, cfg: ScheduleConfig) -> float:
    """Negative-rescue threshold, rising from eps_neg_min to eps_neg_max."""
    return min(cfg.eps_neg_min + t / cfg.alpha, cfg.eps_neg_max)


def epsilon_pair(t: int, cfg: ScheduleConfig) -> float:
    """Required score margin for pairwise rescue, easing from max to min."""
    return max(cfg.eps_pair_max - t / cfg.alpha, cfg.eps_pair_min)


@dataclass
class BatchPartition:
    """Index sets over one batch. noisy holds the flagged samples,
    hard_candidates the variance-pruned subset, hard the scorer-confirmed
    subset. Invariant: hard <= hard_candidates <= noisy."""

    size: int
    noisy: np.ndarray
    hard_candidates: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    hard: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def clean(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.size, dtype=np.int64), self.noisy)

    def check(self) -> None:
        for name, idx in (("noisy", self.noisy), ("hard_candidates", self.hard_candidates),
                          ("hard", self.hard)):
            if idx.size and (idx.min() < 0 or idx.max() >= self.size):
                raise ValidationError(f"{name} indices out of range")
            if np.unique(idx).size != idx.size:
                raise ValidationError(f"{name} indices contain duplicates")
        if self.hard_candidates.size and not np.isin(self.hard_candidates, self.noisy).all():
            raise ValidationError("hard_candidates must be a subset of noisy")
        if self.hard.size and not np.isin(self.hard, self.hard_candidates).all():
            raise ValidationError("hard must be a subset of hard_candidates")


def partition_by_loss(losses: np.ndarray, drop_count: int) -> BatchPartition:
    """Flag the drop_count largest-loss samples. Equal losses are flagged
    lowest batch index first so the result is reproducible."""
    losses = np.asarray(losses, dtype=float)
    n = losses.shape[0]
    if not (0 <= drop_count <= n):
        raise ValidationError(f"drop_count {drop_count} outside [0, {n}]")
    if drop_count == 0:
        return BatchPartition(size=n, noisy=np.empty(0, dtype=np.int64))
    order = np.argsort(-losses, kind="stable")
    noisy = np.sort(order[:drop_count].astype(np.int64))
    return BatchPartition(size=n, noisy=noisy)


class PredictionHistory:
    """Ring buffer of the last m epoch-end prediction scores for every
    tracked (user, item) pair. All pairs are recorded together, so
    readiness is a single flag: m recordings seen."""

    def __init__(self, users: np.ndarray, items: np.ndarray, m: int):
        if m < 1:
            raise ValidationError("history window m must be >= 1")
        if users.shape != items.shape:
            raise ValidationError("users and items must align")
        self.m = m
        self.users = users.astype(np.int64)
        self.items = items.astype(np.int64)
        self._row: dict[tuple[int, int], int] = {
            (int(u), int(i)): k for k, (u, i) in enumerate(zip(self.users, self.items))
        }
        self._buf = np.zeros((len(self._row), m))
        self.count = 0
        self.epochs: list[int] = []
        if len(self._row) != self.users.shape[0]:
            raise ValidationError("tracked pairs must be unique")

    @classmethod
    def for_split(cls, split_data, m: int) -> "PredictionHistory":
        """Track every train positive and every assigned fixed negative."""
        pairs: list[tuple[int, int]] = []
        seen = set()
        for it in split_data.train.interactions:
            if it.label != 1:
                continue
            for pair in ((it.user, it.item),
                         (it.user, split_data.negative_assignment[(it.user, it.item)])):
                if pair not in seen:
                    seen.add(pair)
                    pairs.append(pair)
        users = np.array([p[0] for p in pairs], dtype=np.int64)
        items = np.array([p[1] for p in pairs], dtype=np.int64)
        return cls(users, items, m)

    def __len__(self) -> int:
        return self._buf.shape[0]

    @property
    def ready(self) -> bool:
        return self.count >= self.m

    def record(self, epoch: int, model: backbone.Model) -> None:
        """Append this epoch's prediction for every tracked pair. Epochs
        must strictly increase; this keeps exactly the last m values."""
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValidationError(f"epoch {epoch} not after {self.epochs[-1]}")
        scores = backbone.predict_pairs(model, self.users, self.items)
        self._buf[:, self.count % self.m] = scores
        self.count += 1
        self.epochs.append(epoch)
        if len(self.epochs) > self.m:
            self.epochs = self.epochs[-self.m:]

    def variances(self) -> np.ndarray | None:
        """Population variance over the window for every row, or None
        while fewer than m epochs have been recorded."""
        if not self.ready:
            return None
        return self._buf.var(axis=1)

    def variance(self, user: int, item: int) -> float | None:
        """Window variance for one pair; None when the pair is untracked
        or the buffer is not full yet (the not-ready signal)."""
        row = self._row.get((user, item))
        if row is None or not self.ready:
            return None
        return float(self._buf[row].var())

    def pair_rows(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Row index per pair, -1 where the pair is not tracked."""
        return np.array(
            [self._row.get((int(u), int(i)), -1) for u, i in zip(users, items)],
            dtype=np.int64,
        )

    def is_positive_row(self, split_data) -> np.ndarray:
        """Boolean mask over rows: True where the tracked pair is a train
        positive (the rest are fixed negatives)."""
        pos = split_data.train.positive_pairs()
        return np.array(
            [(int(u), int(i)) in pos for u, i in zip(self.users, self.items)], dtype=bool
        )


def window_variance(values, m: int) -> float:
    """Population variance (divide by m) of the last m values."""
    values = list(values)
    if len(values) < m:
        raise ValidationError(f"need {m} values, got {len(values)}")
    tail = np.asarray(values[-m:], dtype=float)
    return float(tail.var())


def _top_share(order_values: np.ndarray, members: np.ndarray, eps_v: float) -> np.ndarray:
    """Indices of the ceil(eps_v * len(members)) members with the largest
    values, ties resolved toward the lower batch index."""
    if members.size == 0:
        return members
    take = int(np.ceil(eps_v * members.size))
    if take == 0:
        return np.empty(0, dtype=np.int64)
    # stable sort on descending value keeps lower indices first among ties
    order = np.argsort(-order_values, kind="stable")
    return members[order[:take]]


def prune_candidates(
    noisy: np.ndarray,
    pos_variance: np.ndarray,
    neg_variance: np.ndarray,
    eps_v: float,
) -> np.ndarray:
    """Keep the most uncertain flagged samples as hard candidates.

    pos_variance / neg_variance align with ``noisy``; NaN marks a pair
    whose history window is not full (or that has no item on that side).
    The candidate set is the union of the top eps_v share of the ready
    positive pool by positive-pair variance and the top eps_v share of the
    ready negative pool by negative-pair variance.
    """
    noisy = np.asarray(noisy, dtype=np.int64)
    pos_variance = np.asarray(pos_variance, dtype=float)
    neg_variance = np.asarray(neg_variance, dtype=float)
    if pos_variance.shape != noisy.shape or neg_variance.shape != noisy.shape:
        raise ValidationError("variance arrays must align with the noisy index set")
    if not (0.0 <= eps_v <= 1.0):
        raise ValidationError("eps_v must be in [0, 1]")
    pos_ready = ~np.isnan(pos_variance)
    neg_ready = ~np.isnan(neg_variance)
    top_pos = _top_share(pos_variance[pos_ready], noisy[pos_ready], eps_v)
    top_neg = _top_share(neg_variance[neg_ready], noisy[neg_ready], eps_v)
    return np.union1d(top_pos, top_neg).astype(np.int64)


def random_prune_baseline(pool: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Ablation control: a uniform subset of the same size the variance
    rule would keep, drawn from the same ready pool."""
    pool = np.asarray(pool, dtype=np.int64)
    if count < 0 or count > pool.size:
        raise ValidationError(f"cannot draw {count} of {pool.size}")
    if count == 0:
        return np.empty(0, dtype=np.int64)
    picks = rng.choice(pool.size, size=count, replace=False)
    return np.sort(pool[picks])


def identify_hard_pointwise(
    score: int,
    label: int,
    eps_pos: float,
    eps_neg: float,
    literal: bool = False,
) -> bool:
    """Is a flagged pointwise sample consistent with its label?

    Default direction: a positive is rescued when the score clears
    eps_pos, a negative when the score stays at or below eps_neg. The
    ``literal`` switch flips both comparisons (strict, inverted) for
    compatibility with the opposite reading of the rule.
    """
    if label not in (0, 1):
        raise ValidationError("label must be 0 or 1")
    if literal:
        return score < eps_pos if label == 1 else score > eps_neg
    return score >= eps_pos if label == 1 else score <= eps_neg


def identify_hard_pairwise(pos_score: int, neg_score: int, eps_pair: float) -> bool:
    """A flagged pair is genuinely hard when the scorer prefers the
    positive by more than the margin threshold."""
    return (pos_score - neg_score) > eps_pair


def assemble_training_set(size: int, partition: BatchPartition) -> np.ndarray:
    """Final kept indices: everything unflagged plus the confirmed-hard
    rescues, in ascending batch order."""
    if partition.size != size:
        raise ValidationError("partition does not describe this batch")
    partition.check()
    kept = np.union1d(partition.clean, partition.hard)
    return kept.astype(np.int64)
