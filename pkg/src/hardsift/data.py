"""Interaction data: loading, filtering, splitting, noise injection.

File formats handled here:

* interactions: delimited text, one interaction per line, fields
  ``user <sep> item <sep> rating [<sep> timestamp]`` (tab by default).
* item profiles: JSON lines with keys ``item_id``, ``title``, ``description``.
* identifier maps: two-column text, original identifier then dense index.

All in-memory datasets use dense 0-based indices. The mapping back to the
original identifiers is written next to the data when a directory is given.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError, EmptyDatasetError, ValidationError

log = logging.getLogger(__name__)

# rng stream tags, so that independent choices never share a stream
_STREAM_SPLIT = 11
_STREAM_NEGATIVES = 12
_STREAM_NOISE = 13
_STREAM_NOISE_NEGATIVES = 14

NOISE_SOURCES = ("rated_below_3", "synthetic_low_affinity")


@dataclass(frozen=True)
class Interaction:
    """One user-item event. ``label`` is 1 for observed positives; fixed
    negatives used in training never appear as Interaction rows."""

    user: int
    item: int
    label: int = 1
    rating: float | None = None
    planted_noise: bool = False


@dataclass(frozen=True)
class ItemProfile:
    item: int
    title: str
    description: str = ""


@dataclass(frozen=True)
class Dataset:
    interactions: tuple[Interaction, ...]
    user_count: int
    item_count: int

    def __post_init__(self):
        seen = set()
        for n, it in enumerate(self.interactions):
            if not (0 <= it.user < self.user_count):
                raise ValidationError(f"interaction {n}: user {it.user} out of range")
            if not (0 <= it.item < self.item_count):
                raise ValidationError(f"interaction {n}: item {it.item} out of range")
            if it.label not in (0, 1):
                raise ValidationError(f"interaction {n}: label must be 0 or 1")
            if it.label == 1:
                key = (it.user, it.item)
                if key in seen:
                    raise ValidationError(f"duplicate positive pair {key}")
                seen.add(key)

    def positives(self) -> list[Interaction]:
        return [it for it in self.interactions if it.label == 1]

    def positive_pairs(self) -> set[tuple[int, int]]:
        return {(it.user, it.item) for it in self.interactions if it.label == 1}

    def positives_by_user(self) -> dict[int, list[int]]:
        by_user: dict[int, list[int]] = {}
        for it in self.interactions:
            if it.label == 1:
                by_user.setdefault(it.user, []).append(it.item)
        return by_user

    def planted_pairs(self) -> set[tuple[int, int]]:
        return {(it.user, it.item) for it in self.interactions if it.planted_noise}

    def has_ratings(self) -> bool:
        return any(it.rating is not None for it in self.interactions)


@dataclass(frozen=True)
class SplitDataset:
    """Train/valid/test views over one filtered dataset plus the fixed
    negative assigned to every train positive."""

    train: Dataset
    valid: Dataset
    test: Dataset
    negative_assignment: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def user_count(self) -> int:
        return self.train.user_count

    @property
    def item_count(self) -> int:
        return self.train.item_count

    def all_positive_pairs(self) -> set[tuple[int, int]]:
        return (
            self.train.positive_pairs()
            | self.valid.positive_pairs()
            | self.test.positive_pairs()
        )


def read_interaction_rows(path: str | Path, delimiter: str = "\t") -> list[tuple[str, str, float | None]]:
    """Parse the raw file into (user, item, rating) string rows.

    A line may carry 2, 3 or 4 fields; the 4th (timestamp) is ignored.
    Malformed lines raise DataFormatError naming the 1-based line number.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            if len(parts) < 2 or len(parts) > 4:
                raise DataFormatError(f"{path}: line {n}: expected 2-4 fields, got {len(parts)}")
            user, item = parts[0].strip(), parts[1].strip()
            if not user or not item:
                raise DataFormatError(f"{path}: line {n}: empty user or item field")
            rating = None
            if len(parts) >= 3:
                try:
                    rating = float(parts[2])
                except ValueError:
                    raise DataFormatError(f"{path}: line {n}: bad rating {parts[2]!r}") from None
            rows.append((user, item, rating))
    return rows


def index_interactions(
    rows: list[tuple[str, str, float | None]],
    min_rating: float | None = None,
) -> tuple[Dataset, dict[str, int], dict[str, int]]:
    """Dedup, rating-filter and densely re-index raw rows.

    Duplicate (user, item) lines collapse to one interaction keeping the
    highest rating. Rows rated below ``min_rating`` are dropped before
    indices are assigned, so the dense id space has no dead entries.
    Returns the dataset plus the original->dense maps for users and items.
    """
    best: dict[tuple[str, str], float | None] = {}
    order: list[tuple[str, str]] = []
    for user, item, rating in rows:
        key = (user, item)
        if key not in best:
            best[key] = rating
            order.append(key)
        else:
            prev = best[key]
            if prev is None or (rating is not None and rating > prev):
                best[key] = rating

    kept = []
    for key in order:
        rating = best[key]
        if min_rating is not None and (rating is None or rating < min_rating):
            continue
        kept.append((key[0], key[1], rating))
    if not kept:
        raise EmptyDatasetError("no interactions survived the rating filter")

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    interactions = []
    for user, item, rating in kept:
        u = user_map.setdefault(user, len(user_map))
        i = item_map.setdefault(item, len(item_map))
        interactions.append(Interaction(user=u, item=i, rating=rating))
    dataset = Dataset(tuple(interactions), len(user_map), len(item_map))
    return dataset, user_map, item_map


def write_id_maps(user_map: dict[str, int], item_map: dict[str, int], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, mapping in (("user_ids.map", user_map), ("item_ids.map", item_map)):
        with open(out / name, "w", encoding="utf-8") as fh:
            for original, dense in mapping.items():
                fh.write(f"{original}\t{dense}\n")


def read_id_map(path: str | Path) -> dict[str, int]:
    mapping: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}: line {n}: expected 2 columns")
            mapping[parts[0]] = int(parts[1])
    return mapping


def load_interactions(
    path: str | Path,
    min_rating: float | None = None,
    delimiter: str = "\t",
    id_map_dir: str | Path | None = None,
) -> Dataset:
    """Load a delimited interaction file into a densely indexed Dataset.

    When ``id_map_dir`` is given the original->dense identifier maps are
    persisted there as two-column text files.
    """
    rows = read_interaction_rows(path, delimiter=delimiter)
    dataset, user_map, item_map = index_interactions(rows, min_rating=min_rating)
    if id_map_dir is not None:
        write_id_maps(user_map, item_map, id_map_dir)
    return dataset


def write_interactions(dataset: Dataset, path: str | Path, delimiter: str = "\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in dataset.interactions:
            if it.rating is None:
                fh.write(f"{it.user}{delimiter}{it.item}\n")
            else:
                rating = int(it.rating) if float(it.rating).is_integer() else it.rating
                fh.write(f"{it.user}{delimiter}{it.item}{delimiter}{rating}\n")


def _kcore_keep(dataset: Dataset, k: int) -> tuple[set[int], set[int]]:
    """Users/items that survive iterative k-core peeling on positives."""
    pairs = [(it.user, it.item) for it in dataset.interactions if it.label == 1]
    users = {u for u, _ in pairs}
    items = {i for _, i in pairs}
    while True:
        ucount: dict[int, int] = {}
        icount: dict[int, int] = {}
        for u, i in pairs:
            if u in users and i in items:
                ucount[u] = ucount.get(u, 0) + 1
                icount[i] = icount.get(i, 0) + 1
        bad_users = {u for u in users if ucount.get(u, 0) < k}
        bad_items = {i for i in items if icount.get(i, 0) < k}
        if not bad_users and not bad_items:
            return users, items
        users -= bad_users
        items -= bad_items
        if not users or not items:
            raise EmptyDatasetError(f"{k}-core filter removed every interaction")


def kcore_filter(dataset: Dataset, k: int) -> Dataset:
    """Drop users and items with fewer than k positives until a fixpoint,
    then compact the index space. Applying it twice changes nothing."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    users, items = _kcore_keep(dataset, k)
    user_new = {u: n for n, u in enumerate(sorted(users))}
    item_new = {i: n for n, i in enumerate(sorted(items))}
    kept = [
        replace(it, user=user_new[it.user], item=item_new[it.item])
        for it in dataset.interactions
        if it.user in users and it.item in items
    ]
    return Dataset(tuple(kept), len(user_new), len(item_new))


def _largest_remainder(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    raw = [n * r for r in ratios]
    counts = [int(x) for x in raw]
    short = n - sum(counts)
    # hand leftovers to the largest fractional parts, train first on ties
    order = sorted(range(3), key=lambda j: (-(raw[j] - counts[j]), j))
    for j in order[:short]:
        counts[j] += 1
    return counts[0], counts[1], counts[2]


def split(
    dataset: Dataset,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    min_positives: int = 3,
    on_small: str = "error",
) -> SplitDataset:
    """Per-user random split into train/valid/test at the given ratios.

    Counts per user come from the largest-remainder rule, so 5 positives at
    (0.6, 0.2, 0.2) give exactly 3/1/1. Users with fewer than
    ``min_positives`` positives either fail the call or, with
    ``on_small="train"``, keep all their positives in train. Every train
    positive also gets one fixed negative drawn from items the user never
    interacted with in any split.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    if on_small not in ("error", "train"):
        raise ValidationError("on_small must be 'error' or 'train'")

    by_user = dataset.positives_by_user()
    train_rows: list[Interaction] = []
    valid_rows: list[Interaction] = []
    test_rows: list[Interaction] = []
    lookup = {(it.user, it.item): it for it in dataset.interactions if it.label == 1}

    for u in sorted(by_user):
        items = by_user[u]
        if len(items) < min_positives:
            if on_small == "error":
                raise ValidationError(
                    f"user {u} has {len(items)} positives, fewer than {min_positives}"
                )
            train_rows.extend(lookup[(u, i)] for i in items)
            continue
        rng = np.random.default_rng([seed, _STREAM_SPLIT, u])
        perm = rng.permutation(len(items))
        n_train, n_valid, _ = _largest_remainder(len(items), tuple(ratios))
        for rank, pos in enumerate(perm):
            it = lookup[(u, items[pos])]
            if rank < n_train:
                train_rows.append(it)
            elif rank < n_train + n_valid:
                valid_rows.append(it)
            else:
                test_rows.append(it)

    if not train_rows:
        raise EmptyDatasetError("split produced an empty train set")

    uc, ic = dataset.user_count, dataset.item_count
    train = Dataset(tuple(train_rows), uc, ic)
    valid = Dataset(tuple(valid_rows), uc, ic)
    test = Dataset(tuple(test_rows), uc, ic)
    negatives = _assign_negatives(train, exclude=_pairs_by_user(dataset), seed=seed)
    return SplitDataset(train=train, valid=valid, test=test, negative_assignment=negatives)


def _pairs_by_user(*datasets: Dataset) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for ds in datasets:
        for it in ds.interactions:
            if it.label == 1:
                out.setdefault(it.user, set()).add(it.item)
    return out


def _assign_negatives(
    train: Dataset,
    exclude: dict[int, set[int]],
    seed: int,
    stream: int = _STREAM_NEGATIVES,
    existing: dict[tuple[int, int], int] | None = None,
) -> dict[tuple[int, int], int]:
    """One fixed negative per train positive, uniform over the user's
    never-interacted items. The pair stays stable for the whole run so its
    prediction history is meaningful."""
    assignment = dict(existing) if existing else {}
    complements: dict[int, np.ndarray] = {}
    rng_by_user: dict[int, np.random.Generator] = {}
    for it in train.interactions:
        if it.label != 1:
            continue
        key = (it.user, it.item)
        if key in assignment:
            continue
        u = it.user
        if u not in complements:
            blocked = exclude.get(u, set())
            complements[u] = np.array(
                [j for j in range(train.item_count) if j not in blocked], dtype=np.int64
            )
            rng_by_user[u] = np.random.default_rng([seed, stream, u])
        pool = complements[u]
        if pool.size == 0:
            raise ValidationError(f"user {u} interacted with every item; no negatives left")
        assignment[key] = int(pool[rng_by_user[u].integers(pool.size)])
    return assignment


def _affinity_row(affinity, user: int, item_count: int) -> np.ndarray:
    if isinstance(affinity, np.ndarray):
        return affinity[user]
    return np.array([float(affinity(user, j)) for j in range(item_count)])


def inject_noise(
    train: Dataset,
    ratio: float,
    source: str,
    seed: int,
    pool: Dataset | list[Interaction] | None = None,
    affinity=None,
    forbidden: set[tuple[int, int]] | None = None,
) -> Dataset:
    """Append ``floor(ratio * positives)`` planted-noise positives to train.

    ``rated_below_3`` draws from ``pool``, interactions the rating filter
    removed (all rated below 3). ``synthetic_low_affinity`` fabricates pairs
    from each drawn user's bottom affinity decile; ``affinity`` is either a
    (users, items) array or a callable. ``forbidden`` holds positive pairs
    from other splits that must never be injected. ratio 0 returns train
    unchanged. Every injected interaction carries planted_noise=True.
    """
    if not (0.0 <= ratio <= 0.5):
        raise ValidationError(f"noise ratio must be in [0, 0.5], got {ratio}")
    if source not in NOISE_SOURCES:
        raise ValidationError(f"unknown noise source {source!r}")
    if ratio == 0.0:
        return train

    positives = train.positives()
    count = int(ratio * len(positives))
    if count == 0:
        return train
    taken = train.positive_pairs() | (forbidden or set())
    rng = np.random.default_rng([seed, _STREAM_NOISE])
    added: list[Interaction] = []

    if source == "rated_below_3":
        if pool is None:
            raise ValidationError("rated_below_3 needs a pool of below-threshold interactions")
        entries = pool.interactions if isinstance(pool, Dataset) else list(pool)
        eligible = []
        for it in entries:
            if it.rating is None:
                raise ValidationError("noise pool entries must carry ratings")
            if it.rating >= 3:
                continue
            if not (0 <= it.user < train.user_count and 0 <= it.item < train.item_count):
                continue
            if (it.user, it.item) in taken:
                continue
            eligible.append(it)
        if len(eligible) < count:
            raise ValidationError(
                f"noise pool too small: need {count}, only {len(eligible)} eligible"
            )
        picks = rng.choice(len(eligible), size=count, replace=False)
        for p in sorted(int(x) for x in picks):
            it = eligible[p]
            added.append(replace(it, label=1, planted_noise=True))
            taken.add((it.user, it.item))
    else:
        if affinity is None:
            raise ValidationError("synthetic_low_affinity needs an affinity oracle")
        pos_users = np.array([it.user for it in positives], dtype=np.int64)
        thresholds: dict[int, float] = {}
        attempts = 0
        while len(added) < count:
            attempts += 1
            if attempts > 100 * count:
                raise ValidationError(
                    f"could not place {count} noise pairs; placed {len(added)} before the "
                    "low-affinity pools ran dry"
                )
            u = int(pos_users[rng.integers(pos_users.size)])
            row = _affinity_row(affinity, u, train.item_count)
            if u not in thresholds:
                thresholds[u] = float(np.quantile(row, 0.1))
            candidates = [
                j for j in range(train.item_count)
                if row[j] <= thresholds[u] and (u, j) not in taken
            ]
            if not candidates:
                continue
            j = candidates[int(rng.integers(len(candidates)))]
            rating = float(rng.integers(1, 3))
            added.append(Interaction(user=u, item=j, rating=rating, planted_noise=True))
            taken.add((u, j))

    return Dataset(train.interactions + tuple(added), train.user_count, train.item_count)


def inject_split_noise(
    split_data: SplitDataset,
    ratio: float,
    source: str,
    seed: int,
    pool: Dataset | list[Interaction] | None = None,
    affinity=None,
) -> SplitDataset:
    """inject_noise on the train side of a split, leaving valid/test
    untouched and extending the fixed negative assignment to cover the
    injected positives."""
    forbidden = split_data.valid.positive_pairs() | split_data.test.positive_pairs()
    new_train = inject_noise(
        split_data.train, ratio, source, seed, pool=pool, affinity=affinity, forbidden=forbidden
    )
    if new_train is split_data.train:
        return split_data
    exclude = _pairs_by_user(new_train, split_data.valid, split_data.test)
    negatives = _assign_negatives(
        new_train,
        exclude=exclude,
        seed=seed,
        stream=_STREAM_NOISE_NEGATIVES,
        existing=split_data.negative_assignment,
    )
    return SplitDataset(
        train=new_train,
        valid=split_data.valid,
        test=split_data.test,
        negative_assignment=negatives,
    )


def load_item_profiles(
    path: str | Path,
    item_map: dict[str, int] | None = None,
) -> dict[int, ItemProfile]:
    """Read a JSONL profile file into a dense-id keyed dict.

    With ``item_map`` the raw ``item_id`` values are translated and records
    for unknown items are skipped (counted in a debug log). Without a map
    the ids must already be dense integers. A record with a missing or
    empty title is rejected with its line number.
    """
    profiles: dict[int, ItemProfile] = {}
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {n}: invalid JSON ({exc.msg})") from None
            if "item_id" not in record:
                raise DataFormatError(f"{path}: line {n}: missing item_id")
            title = record.get("title")
            if not isinstance(title, str) or not title.strip():
                raise DataFormatError(f"{path}: line {n}: missing or empty title")
            raw_id = record["item_id"]
            if item_map is not None:
                dense = item_map.get(str(raw_id))
                if dense is None:
                    skipped += 1
                    continue
            else:
                try:
                    dense = int(raw_id)
                except (TypeError, ValueError):
                    raise DataFormatError(
                        f"{path}: line {n}: item_id {raw_id!r} is not a dense index "
                        "and no id map was given"
                    ) from None
            profiles[dense] = ItemProfile(
                item=dense, title=title.strip(), description=str(record.get("description", "")).strip()
            )
    if skipped:
        log.debug("skipped %d profile records for unknown items", skipped)
    return profiles


def write_item_profiles(profiles: dict[int, ItemProfile], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(profiles):
            p = profiles[item]
            fh.write(json.dumps(
                {"item_id": p.item, "title": p.title, "description": p.description},
                sort_keys=True,
            ) + "\n")


def missing_items(dataset: Dataset, profiles: dict[int, ItemProfile]) -> list[int]:
    """Items referenced by the dataset that have no profile."""
    used = {it.item for it in dataset.interactions}
    return sorted(used - set(profiles))
