"""Ranking metrics, denoising quality and the memorization pattern trace.

Evaluation ranks the full item catalog for each user, minus the positives
already seen in earlier splits. Ties break toward the lower item index so
two runs of the same model always report the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone, loss
from .data import SplitDataset
from .errors import ValidationError

_STREAM_TRACE = 16
_STREAM_TRACE_SHUFFLE = 17


def rank_from_scores(scores: np.ndarray, excluded: set[int] | None = None) -> np.ndarray:
    """Item indices by descending score, lowest index first on ties,
    with excluded items left out entirely."""
    scores = np.asarray(scores, dtype=float)
    idx = np.arange(scores.shape[0])
    if excluded:
        mask = np.ones(scores.shape[0], dtype=bool)
        mask[list(excluded)] = False
        idx = idx[mask]
        scores = scores[mask]
    order = np.lexsort((idx, -scores))
    return idx[order]


def rank_items(model: backbone.Model, user: int, excluded: set[int] | None = None) -> np.ndarray:
    scores = backbone.score_matrix(model, np.array([user]))[0]
    return rank_from_scores(scores, excluded)


def recall_at_k(ranking, relevant: set[int], k: int) -> float:
    """|top-k intersect relevant| / |relevant|."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if not relevant:
        raise ValidationError("relevant set must not be empty")
    top = set(int(i) for i in list(ranking)[:k])
    return len(top & relevant) / len(relevant)


def ndcg_at_k(ranking, relevant: set[int], k: int) -> float:
    """Binary-gain NDCG with 1/log2(rank+1) discounts; the ideal DCG puts
    min(k, |relevant|) hits up front."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if not relevant:
        raise ValidationError("relevant set must not be empty")
    dcg = 0.0
    for rank, item in enumerate(list(ranking)[:k], start=1):
        if int(item) in relevant:
            dcg += 1.0 / np.log2(rank + 1)
    ideal_hits = min(k, len(relevant))
    idcg = sum(1.0 / np.log2(r + 1) for r in range(1, ideal_hits + 1))
    return dcg / idcg


@dataclass
class MetricsResult:
    recall: dict[int, float]
    ndcg: dict[int, float]
    evaluated_users: int
    skipped_users: int
    per_user: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "evaluated_users": self.evaluated_users,
            "skipped_users": self.skipped_users,
        }


def evaluate_split(
    model: backbone.Model,
    split_data: SplitDataset,
    which: str = "test",
    ks: tuple[int, ...] = (5, 10),
) -> MetricsResult:
    """Mean recall and NDCG at each cutoff over users that have relevant
    items in the chosen split. Valid rankings hide train positives; test
    rankings hide train and valid positives. Users with nothing relevant
    are skipped but counted."""
    if which not in ("valid", "test"):
        raise ValidationError("which must be 'valid' or 'test'")
    target = split_data.valid if which == "valid" else split_data.test
    relevant_by_user = target.positives_by_user()

    hide = split_data.train.positives_by_user()
    if which == "test":
        for u, items in split_data.valid.positives_by_user().items():
            hide.setdefault(u, []).extend(items)

    users = sorted(u for u, items in relevant_by_user.items() if items)
    skipped = split_data.user_count - len(users)
    if not users:
        raise ValidationError(f"no users have relevant items in the {which} split")

    user_arr = np.array(users, dtype=np.int64)
    scores = backbone.score_matrix(model, user_arr)
    per_recall = {k: np.zeros(len(users)) for k in ks}
    per_ndcg = {k: np.zeros(len(users)) for k in ks}
    for row, u in enumerate(users):
        ranking = rank_from_scores(scores[row], set(hide.get(u, [])))
        relevant = set(relevant_by_user[u])
        for k in ks:
            per_recall[k][row] = recall_at_k(ranking, relevant, k)
            per_ndcg[k][row] = ndcg_at_k(ranking, relevant, k)
    return MetricsResult(
        recall={k: float(per_recall[k].mean()) for k in ks},
        ndcg={k: float(per_ndcg[k].mean()) for k in ks},
        evaluated_users=len(users),
        skipped_users=skipped,
        per_user={"recall": per_recall, "ndcg": per_ndcg},
    )


@dataclass(frozen=True)
class NoiseQuality:
    """How well the pipeline separated planted noise from the rest.
    precision and recall describe the dropped set; contamination is the
    planted share of the rescued set. precision is None when nothing was
    dropped, contamination is None when nothing was rescued."""

    precision: float | None
    recall: float
    contamination: float | None
    dropped: int
    rescued: int
    planted: int

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "contamination": self.contamination,
            "dropped": self.dropped,
            "rescued": self.rescued,
            "planted": self.planted,
        }


def denoise_quality(
    dropped: set[tuple[int, int]],
    rescued: set[tuple[int, int]],
    planted: set[tuple[int, int]],
) -> NoiseQuality:
    """Precision and recall of the dropped set against the planted flags,
    plus the planted share of the rescued set."""
    if not planted:
        raise ValidationError("no planted noise to measure against")
    hit = len(dropped & planted)
    return NoiseQuality(
        precision=hit / len(dropped) if dropped else None,
        recall=hit / len(planted),
        contamination=len(rescued & planted) / len(rescued) if rescued else None,
        dropped=len(dropped),
        rescued=len(rescued),
        planted=len(planted),
    )


def pattern_trace(
    split_data: SplitDataset,
    d_values: tuple[int, ...] = (1, 3),
    dim: int = 16,
    epochs: int = 20,
    learning_rate: float = 0.005,
    l2: float = 1e-4,
    batch_size: int = 1024,
    seed: int = 0,
) -> list[dict]:
    """Per-epoch loss/score curves for easy, hard and noisy samples.

    Noisy samples pair a known false positive (planted flag or rating
    below 3) with a false negative taken from the same user's test
    positives. The remaining clean positives are dealt round-robin to one
    class per requested candidate count d; each keeps d seeded candidate
    negatives and trains against the candidate the current model scores
    highest, so d=1 gives easy pairs and larger d progressively harder
    ones. A plain pairwise model trains on all classes together and each
    epoch contributes one row per class: epoch, class, mean loss, mean
    prediction score of the positive item.
    """
    if not d_values:
        raise ValidationError("need at least one candidate count d")
    if any(d < 1 for d in d_values):
        raise ValidationError("candidate counts must be >= 1")
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")

    train = split_data.train
    if not train.has_ratings() and not any(it.planted_noise for it in train.interactions):
        raise ValidationError(
            "pattern trace needs rating data or planted flags to identify false positives"
        )
    rng = np.random.default_rng([seed, _STREAM_TRACE])
    test_by_user = split_data.test.positives_by_user()
    train_by_user = train.positives_by_user()

    noisy_users, noisy_pos, noisy_neg = [], [], []
    clean = []
    for it in train.interactions:
        if it.label != 1:
            continue
        is_fp = it.planted_noise or (it.rating is not None and it.rating < 3)
        if is_fp:
            flipped = test_by_user.get(it.user)
            if flipped:
                noisy_users.append(it.user)
                noisy_pos.append(it.item)
                noisy_neg.append(int(flipped[int(rng.integers(len(flipped)))]))
        else:
            clean.append((it.user, it.item))
    if not noisy_users:
        raise ValidationError("no false-positive interactions found for the noisy class")

    def class_name(d: int) -> str:
        return "easy_d1" if d == 1 else f"hard_d{d}"

    order = rng.permutation(len(clean))
    classes: dict[str, dict] = {
        class_name(d): {"users": [], "pos": [], "cands": [], "d": d} for d in d_values
    }
    names = [class_name(d) for d in d_values]
    for rank, pick in enumerate(order):
        u, i = clean[int(pick)]
        blocked = set(train_by_user.get(u, []))
        pool = np.array([j for j in range(train.item_count) if j not in blocked])
        if pool.size == 0:
            continue
        slot = classes[names[rank % len(names)]]
        cands = pool[rng.choice(pool.size, size=min(slot["d"], pool.size), replace=False)]
        slot["users"].append(u)
        slot["pos"].append(i)
        slot["cands"].append(cands)

    class_arrays = {}
    for name, slot in classes.items():
        class_arrays[name] = {
            "users": np.array(slot["users"], dtype=np.int64),
            "pos": np.array(slot["pos"], dtype=np.int64),
            "cands": slot["cands"],
        }
    class_arrays["noisy"] = {
        "users": np.array(noisy_users, dtype=np.int64),
        "pos": np.array(noisy_pos, dtype=np.int64),
        "neg": np.array(noisy_neg, dtype=np.int64),
    }

    model = backbone.init_model(backbone.MF, train.user_count, train.item_count, dim, seed)
    rows: list[dict] = []
    for epoch in range(epochs):
        users_all, pos_all, neg_all = [], [], []
        for name in names:
            arr = class_arrays[name]
            negs = np.array(
                [
                    int(c[int(np.argmax(backbone.predict_pairs(
                        model, np.full(c.shape, u, dtype=np.int64), c)))])
                    for u, c in zip(arr["users"], arr["cands"])
                ],
                dtype=np.int64,
            )
            arr["neg"] = negs
            users_all.append(arr["users"])
            pos_all.append(arr["pos"])
            neg_all.append(negs)
        arr = class_arrays["noisy"]
        users_all.append(arr["users"])
        pos_all.append(arr["pos"])
        neg_all.append(arr["neg"])

        users_cat = np.concatenate(users_all)
        pos_cat = np.concatenate(pos_all)
        neg_cat = np.concatenate(neg_all)
        shuffle = np.random.default_rng([seed, _STREAM_TRACE_SHUFFLE, epoch])
        perm = shuffle.permutation(users_cat.shape[0])
        for start in range(0, perm.shape[0], batch_size):
            take = perm[start:start + batch_size]
            yp = backbone.predict_pairs(model, users_cat[take], pos_cat[take])
            yn = backbone.predict_pairs(model, users_cat[take], neg_cat[take])
            d = loss.bpr_grad(yp, yn) / take.shape[0]
            grads = backbone.zero_gradients(model)
            backbone.score_gradients(model, users_cat[take], pos_cat[take], d, into=grads)
            backbone.score_gradients(model, users_cat[take], neg_cat[take], -d, into=grads)
            backbone.apply_gradients(model, grads, learning_rate, optimizer="adam", l2=l2)

        for name in names + ["noisy"]:
            arr = class_arrays[name]
            yp = backbone.predict_pairs(model, arr["users"], arr["pos"])
            yn = backbone.predict_pairs(model, arr["users"], arr["neg"])
            losses = loss.bpr_loss(yp, yn)
            rows.append({
                "epoch": epoch,
                "class": name,
                "mean_loss": float(losses.mean()),
                "mean_score": float(yp.mean()),
            })
    return rows
