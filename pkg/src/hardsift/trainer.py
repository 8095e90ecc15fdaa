"""The denoising training loop.

Each mini-batch goes through up to four stages, every one of them
optional via the ablation toggles:

1. loss flagging (ld): the epsilon_l(T) largest-loss samples are flagged.
2. candidate pruning (vs, or the rs random control): flagged samples with
   the most volatile recent predictions become hard candidates.
3. scorer confirmation (lms): candidates whose scores say the label is
   right get rescued back into the batch.
4. preference updating (pu): at epoch end, suspiciously stable positives
   and volatile negatives accumulate confidence; confident pairs trigger
   one preference edit each.

The gradient step then runs on (batch minus flagged) union rescued. With
everything off this is a plain pairwise or pointwise trainer, and runs
with the same config and seed are bit-identical.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import backbone, denoise, evaluation, loss, preference, scorer
from .data import SplitDataset
from .denoise import ScheduleConfig
from .errors import ValidationError

_STREAM_BATCH = 5
_STREAM_RS = 6


@dataclass(frozen=True)
class Ablation:
    """Which pipeline stages run. selection picks how hard candidates are
    chosen when lms is on: 'vs' ranks by prediction variance, 'rs' draws
    the same number of candidates uniformly (the ablation control)."""

    ld: bool = True
    selection: str = "vs"
    lms: bool = True
    pu: bool = True

    def __post_init__(self):
        if self.selection not in ("vs", "rs"):
            raise ValidationError("selection must be 'vs' or 'rs'")

    @classmethod
    def vanilla(cls) -> "Ablation":
        return cls(ld=False, lms=False, pu=False)

    @classmethod
    def loss_drop(cls) -> "Ablation":
        return cls(ld=True, lms=False, pu=False)


@dataclass
class RunConfig:
    mode: str = loss.PAIRWISE
    backbone: str = backbone.MF
    dim: int = 64
    layers: int = 0
    learning_rate: float = 0.005
    l2: float = 1e-4
    optimizer: str = "adam"
    batch_size: int = 1024
    max_epochs: int = 200
    early_stop_patience: int | None = 10
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ablation: Ablation = field(default_factory=Ablation)
    scorer_parallelism: int = 4
    pointwise_rescue_literal: bool = False
    max_profiles_per_summary: int = 30

    def __post_init__(self):
        if self.mode not in loss.MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.backbone not in backbone.KINDS:
            raise ValidationError(f"unknown backbone {self.backbone!r}")
        if self.backbone == backbone.MF and self.layers != 0:
            raise ValidationError("mf takes no propagation layers")
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.l2 < 0:
            raise ValidationError("l2 must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValidationError("early_stop_patience must be >= 1 or None")
        if self.scorer_parallelism < 1:
            raise ValidationError("scorer_parallelism must be >= 1")

    def as_dict(self) -> dict:
        out = asdict(self)
        return out


@dataclass
class RunReport:
    """Everything a run produced. wall_clock_seconds is kept on the object
    but left out of the serialized report so identical runs write
    identical files; callers that care persist it separately."""

    config: dict
    epochs: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    preference_log: list[dict] = field(default_factory=list)
    final: dict | None = None
    wall_clock_seconds: float | None = None

    def deterministic_dict(self) -> dict:
        return {
            "config": self.config,
            "epochs": self.epochs,
            "counters": self.counters,
            "preference_log": self.preference_log,
            "final": self.final,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.deterministic_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_batches(
    split_data: SplitDataset,
    mode: str,
    epoch: int,
    seed: int,
    batch_size: int,
) -> list[loss.Batch]:
    """Shuffled mini-batches for one epoch, seeded by (seed, epoch).

    Pairwise mode yields one sample per train positive with its fixed
    negative. Pointwise mode yields the positive plus the fixed negative
    as a label-0 sample, so the count doubles. The last batch may be
    short.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if mode not in loss.MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    positives = [(it.user, it.item) for it in split_data.train.interactions if it.label == 1]
    if not positives:
        raise ValidationError("train split has no positives")
    users = np.array([u for u, _ in positives], dtype=np.int64)
    pos_items = np.array([i for _, i in positives], dtype=np.int64)
    neg_items = np.array(
        [split_data.negative_assignment[p] for p in positives], dtype=np.int64
    )
    rng = np.random.default_rng([seed, _STREAM_BATCH, epoch])
    batches = []
    if mode == loss.PAIRWISE:
        perm = rng.permutation(users.shape[0])
        for start in range(0, perm.shape[0], batch_size):
            take = perm[start:start + batch_size]
            batches.append(loss.Batch(
                mode, users[take], pos_items=pos_items[take], neg_items=neg_items[take]
            ))
    else:
        all_users = np.concatenate([users, users])
        all_items = np.concatenate([pos_items, neg_items])
        labels = np.concatenate([
            np.ones(users.shape[0], dtype=np.int64),
            np.zeros(users.shape[0], dtype=np.int64),
        ])
        perm = rng.permutation(all_users.shape[0])
        for start in range(0, perm.shape[0], batch_size):
            take = perm[start:start + batch_size]
            batches.append(loss.Batch(
                mode, all_users[take], items=all_items[take], labels=labels[take]
            ))
    return batches


def _gradient_step(model, batch, kept, config, graph):
    """Mean-loss gradient over the kept samples, one optimizer step."""
    n = kept.shape[0]
    grads = backbone.zero_gradients(model)
    if batch.mode == loss.PAIRWISE:
        d = loss.bpr_grad(batch.pos_scores[kept], batch.neg_scores[kept]) / n
        backbone.score_gradients(model, batch.users[kept], batch.pos_items[kept], d, into=grads)
        backbone.score_gradients(model, batch.users[kept], batch.neg_items[kept], -d, into=grads)
    else:
        d = loss.bce_grad(batch.scores[kept], batch.labels[kept]) / n
        backbone.score_gradients(model, batch.users[kept], batch.items[kept], d, into=grads)
    grads = backbone.backprop(model, grads, graph)
    backbone.apply_gradients(model, grads, config.learning_rate, config.optimizer, config.l2)


def _candidate_variances(history, batch, noisy):
    """Positive- and negative-side window variances aligned with the noisy
    index set; NaN where the pair is not ready or has no item on that side."""
    all_vars = history.variances()
    n = noisy.shape[0]
    pos_var = np.full(n, np.nan)
    neg_var = np.full(n, np.nan)
    if all_vars is None or n == 0:
        return pos_var, neg_var
    if batch.mode == loss.PAIRWISE:
        pos_rows = history.pair_rows(batch.users[noisy], batch.pos_items[noisy])
        neg_rows = history.pair_rows(batch.users[noisy], batch.neg_items[noisy])
        pos_var[pos_rows >= 0] = all_vars[pos_rows[pos_rows >= 0]]
        neg_var[neg_rows >= 0] = all_vars[neg_rows[neg_rows >= 0]]
    else:
        rows = history.pair_rows(batch.users[noisy], batch.items[noisy])
        labels = batch.labels[noisy]
        ok = rows >= 0
        pos_side = ok & (labels == 1)
        neg_side = ok & (labels == 0)
        pos_var[pos_side] = all_vars[rows[pos_side]]
        neg_var[neg_side] = all_vars[rows[neg_side]]
    return pos_var, neg_var


def _rescue(batch, candidates, t, config, book, profiles, scorer_backend, epoch, stats):
    """Score the hard candidates and keep the ones whose scores agree with
    their labels. Any failure along the way (no preference, no profile,
    scoring error) just leaves that sample unrescued."""
    sched = config.schedule
    requests_list = []
    owners = []  # (candidate index, slot) slot 0=pos/self, 1=neg
    for k in candidates:
        u = int(batch.users[k])
        pref = book.ensure(u, epoch)
        if pref is None:
            continue
        if batch.mode == loss.PAIRWISE:
            items = (int(batch.pos_items[k]), int(batch.neg_items[k]))
        else:
            items = (int(batch.items[k]),)
        if any(i not in profiles for i in items):
            continue
        for slot, i in enumerate(items):
            requests_list.append(scorer.ScoreRequest(
                user=u, item=i, preference_text=pref.text,
                item_profile=profiles[i], preference_version=pref.version,
            ))
            owners.append((int(k), slot))

    stats["scoring_requests"] += len(requests_list)
    results = scorer.score_many(scorer_backend, requests_list, config.scorer_parallelism)
    stats["scoring_failures"] += sum(1 for r in results if r is None)

    by_candidate: dict[int, dict[int, int | None]] = {}
    for (k, slot), value in zip(owners, results):
        by_candidate.setdefault(k, {})[slot] = value

    hard = []
    for k in sorted(by_candidate):
        slots = by_candidate[k]
        if batch.mode == loss.PAIRWISE:
            s_pos, s_neg = slots.get(0), slots.get(1)
            if s_pos is None or s_neg is None:
                continue
            if denoise.identify_hard_pairwise(s_pos, s_neg, denoise.epsilon_pair(t, sched)):
                hard.append(k)
        else:
            value = slots.get(0)
            if value is None:
                continue
            keep = denoise.identify_hard_pointwise(
                value, int(batch.labels[k]),
                denoise.epsilon_pos(t, sched), denoise.epsilon_neg(t, sched),
                literal=config.pointwise_rescue_literal,
            )
            if keep:
                hard.append(k)
    return np.array(hard, dtype=np.int64)


def _epoch_preference_updates(history, split_data, t, config, counters_obj, book, epoch,
                              attempt_log, stats, events):
    """Detect suspected false positives/negatives over all tracked pairs,
    bump their confidence, and apply one edit per newly confident pair.
    A failed edit is retried once on a later epoch, then given up."""
    all_vars = history.variances()
    if all_vars is None:
        return
    pos_mask = history.is_positive_row(split_data)
    pos_rows = np.flatnonzero(pos_mask)
    neg_rows = np.flatnonzero(~pos_mask)
    pos_pairs = [(int(history.users[r]), int(history.items[r])) for r in pos_rows]
    neg_pairs = [(int(history.users[r]), int(history.items[r])) for r in neg_rows]
    count = denoise.epsilon_l(t, config.schedule, len(pos_pairs))
    fp, fn = preference.detect_fp_fn(
        pos_pairs, all_vars[pos_rows], neg_pairs, all_vars[neg_rows], count
    )
    counters_obj.update(fp, fn)
    for kind in (preference.KIND_FP, preference.KIND_FN):
        for pair in counters_obj.confident(config.schedule.eps_gamma, kind):
            u, i = pair
            ok = book.apply_update(u, i, kind, epoch)
            if ok:
                counters_obj.consume(pair, kind)
                stats["preference_updates"] += 1
                events.append({"epoch": epoch, "user": u, "item": i, "kind": kind})
            else:
                attempts = attempt_log.get((pair, kind), 0) + 1
                attempt_log[(pair, kind)] = attempts
                if attempts >= 2:
                    counters_obj.consume(pair, kind)
                    stats["preference_updates_failed"] += 1


def train(
    config: RunConfig,
    split_data: SplitDataset,
    profiles: dict | None = None,
    scorer_backend=None,
    editor=None,
    pref_store: preference.PreferenceStore | None = None,
    report_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[backbone.Model, RunReport]:
    """Run the full loop and return the best model with its report.

    The best model is the one with the highest validation NDCG@10 seen so
    far; training stops early once that metric fails to improve for
    early_stop_patience consecutive epochs. When report_path is given the
    report is rewritten after every epoch so an interrupted run still
    leaves a usable record. Final test metrics come from the best model.
    """
    ab = config.ablation
    if ab.lms and scorer_backend is None:
        raise ValidationError("lms needs a scorer backend")
    if ab.lms and profiles is None:
        raise ValidationError("lms needs item profiles")
    if (ab.lms or ab.pu) and editor is None:
        editor = preference.OraclePreferenceEditor()
    profiles = profiles or {}

    started = time.monotonic()
    model = backbone.init_model(
        config.backbone, split_data.user_count, split_data.item_count,
        config.dim, config.seed, layers=config.layers,
    )
    graph = None
    if config.backbone == backbone.LIGHTGCN_LITE:
        graph = backbone.build_graph(split_data.train)
        backbone.propagate(model, graph)

    history = denoise.PredictionHistory.for_split(split_data, config.schedule.m)
    user_items = split_data.train.positives_by_user()
    book = preference.PreferenceBook(
        editor or preference.OraclePreferenceEditor(),
        pref_store if pref_store is not None else preference.PreferenceStore(),
        profiles, user_items, config.max_profiles_per_summary,
    )
    counters_obj = preference.ConfidenceCounters()
    attempt_log: dict = {}
    planted = split_data.train.planted_pairs()

    stats = {
        "iterations": 0,
        "scoring_requests": 0,
        "scoring_failures": 0,
        "preference_updates": 0,
        "preference_updates_failed": 0,
        "dropped_total": 0,
        "rescued_total": 0,
        "planted_dropped_total": 0,
        "planted_rescued_total": 0,
    }
    report = RunReport(config=config.as_dict())
    events: list[dict] = []

    best_metric = None
    best_epoch = None
    best_tables = None
    bad_streak = 0
    stopped_early = False
    t = 0

    for epoch in range(config.max_epochs):
        batches = build_batches(split_data, config.mode, epoch, config.seed, config.batch_size)
        loss_sum = 0.0
        loss_count = 0
        epoch_noisy = epoch_cand = epoch_hard = epoch_trained = 0
        dropped_pairs: set = set()
        rescued_pairs: set = set()

        for batch in batches:
            size = len(batch)
            losses = loss.batch_losses(model, batch)
            loss_sum += float(losses.sum())
            loss_count += size

            if ab.ld:
                drop = min(denoise.epsilon_l(t, config.schedule, size), size)
                part = denoise.partition_by_loss(losses, drop)
            else:
                part = denoise.BatchPartition(size=size, noisy=np.empty(0, dtype=np.int64))

            if ab.lms and part.noisy.size:
                pos_var, neg_var = _candidate_variances(history, batch, part.noisy)
                vs_pick = denoise.prune_candidates(part.noisy, pos_var, neg_var, config.schedule.eps_v)
                if ab.selection == "rs":
                    ready = part.noisy[~(np.isnan(pos_var) & np.isnan(neg_var))]
                    rng = np.random.default_rng([config.seed, _STREAM_RS, t])
                    part.hard_candidates = denoise.random_prune_baseline(ready, vs_pick.size, rng)
                else:
                    part.hard_candidates = vs_pick
                if part.hard_candidates.size:
                    part.hard = _rescue(
                        batch, part.hard_candidates, t, config, book, profiles,
                        scorer_backend, epoch, stats,
                    )

            kept = denoise.assemble_training_set(size, part)
            if kept.size:
                _gradient_step(model, batch, kept, config, graph)

            pairs = batch.positive_pairs()
            for k in part.noisy:
                pair = pairs[int(k)]
                if pair is not None:
                    dropped_pairs.add(pair)
            for k in part.hard:
                pair = pairs[int(k)]
                if pair is not None:
                    rescued_pairs.add(pair)
                    dropped_pairs.discard(pair)
            epoch_noisy += int(part.noisy.size)
            epoch_cand += int(part.hard_candidates.size)
            epoch_hard += int(part.hard.size)
            epoch_trained += int(kept.size)
            assert kept.size == size - part.noisy.size + part.hard.size
            t += 1

        if config.backbone == backbone.LIGHTGCN_LITE:
            backbone.propagate(model, graph)
        history.record(epoch, model)

        if ab.pu:
            _epoch_preference_updates(
                history, split_data, t, config, counters_obj, book, epoch,
                attempt_log, stats, events,
            )

        valid_metrics = None
        if split_data.valid.positives():
            valid_metrics = evaluation.evaluate_split(model, split_data, "valid", ks=(5, 10))

        noise_metrics = None
        if planted:
            quality = evaluation.denoise_quality(dropped_pairs, rescued_pairs, planted)
            noise_metrics = quality.as_dict()
            stats["planted_dropped_total"] += len(dropped_pairs & planted)
            stats["planted_rescued_total"] += len(rescued_pairs & planted)
        stats["dropped_total"] += epoch_noisy - epoch_hard
        stats["rescued_total"] += epoch_hard
        stats["iterations"] = t

        epoch_row = {
            "epoch": epoch,
            "t_end": t,
            "mean_loss": loss_sum / loss_count,
            "epsilon_l_nominal": denoise.epsilon_l(t, config.schedule, config.batch_size),
            "noisy": epoch_noisy,
            "candidates": epoch_cand,
            "rescued": epoch_hard,
            "trained": epoch_trained,
            "valid": valid_metrics.as_dict() if valid_metrics else None,
            "noise": noise_metrics,
            "preference_updates": stats["preference_updates"],
        }
        report.epochs.append(epoch_row)
        report.counters = dict(stats)
        report.preference_log = events
        if report_path is not None:
            report.save(report_path)

        if valid_metrics is not None:
            current = valid_metrics.ndcg[10]
            if best_metric is None or current > best_metric:
                best_metric = current
                best_epoch = epoch
                best_tables = (model.user_embeddings.copy(), model.item_embeddings.copy())
                bad_streak = 0
            else:
                bad_streak += 1
                if config.early_stop_patience is not None and bad_streak >= config.early_stop_patience:
                    stopped_early = True
                    break

    if best_tables is not None:
        best_model = backbone.Model(
            kind=config.backbone,
            user_embeddings=best_tables[0],
            item_embeddings=best_tables[1],
            layers=config.layers,
        )
    else:
        best_model = model
    if config.backbone == backbone.LIGHTGCN_LITE:
        backbone.propagate(best_model, graph)

    final: dict = {
        "epochs_trained": len(report.epochs),
        "stopped_early": stopped_early,
        "best_epoch": best_epoch,
        "best_valid_ndcg10": best_metric,
    }
    if split_data.test.positives():
        final["test"] = evaluation.evaluate_split(best_model, split_data, "test", ks=(5, 10)).as_dict()
    report.final = final
    report.wall_clock_seconds = time.monotonic() - started
    if report_path is not None:
        report.save(report_path)
    if checkpoint_dir is not None:
        backbone.save_checkpoint(best_model, checkpoint_dir)
    return best_model, report
