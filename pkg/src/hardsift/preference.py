"""User preference texts and their iterative refinement.

A user's preference starts as a summary of the items they interacted
with. At every epoch end the trainer looks across all tracked training
pairs: positives whose predictions barely move (smallest window variance)
look like false positives, negatives that keep jumping around (largest
window variance) look like false negatives. A pair flagged often enough
(eps_gamma epochs) becomes confident and triggers one preference edit:
false positives get their item's characteristics removed from the text,
false negatives get them added. Each edit bumps the preference version,
which invalidates cached scores for that user.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import prompts, scorer
from .data import ItemProfile
from .errors import (
    ProtocolError,
    RemoteEndpointError,
    ScoreParseError,
    SummarizationError,
    ValidationError,
)

KIND_FP = "fp"
KIND_FN = "fn"
KIND_INIT = "init"

_ORACLE_PREFIX = "Enjoys: "
_ORACLE_SEP = "; "


@dataclass(frozen=True)
class PreferenceEvent:
    version: int
    kind: str
    item: int | None = None


@dataclass(frozen=True)
class UserPreference:
    user: int
    text: str
    version: int
    history: tuple[PreferenceEvent, ...] = ()

    def __post_init__(self):
        if self.version < 1:
            raise ValidationError("preference versions start at 1")
        if not self.text.strip():
            raise ValidationError("preference text must not be empty")


class OraclePreferenceEditor:
    """Deterministic text-level editor for offline runs. The summary is a
    concatenation of the item titles, so tests can check that an edit added
    or removed exactly one item's marker."""

    def summarize(self, profiles: list[ItemProfile]) -> str:
        if not profiles:
            raise SummarizationError("no profiles to summarize")
        return _ORACLE_PREFIX + _ORACLE_SEP.join(p.title for p in profiles)

    def revise(self, text: str, profile: ItemProfile, kind: str) -> str:
        if kind not in (KIND_FP, KIND_FN):
            raise ValidationError(f"unknown revision kind {kind!r}")
        if text.startswith(_ORACLE_PREFIX):
            titles = text[len(_ORACLE_PREFIX):].split(_ORACLE_SEP)
        else:
            titles = [text]
        if kind == KIND_FP:
            titles = [t for t in titles if t != profile.title]
            if not titles:
                titles = ["nothing in particular"]
        elif profile.title not in titles:
            titles = titles + [profile.title]
        return _ORACLE_PREFIX + _ORACLE_SEP.join(titles)


class RemotePreferenceEditor:
    """Routes summaries and revisions through the chat endpoint; replies
    must come back inside a <preference> tag."""

    def __init__(self, endpoint: scorer.EndpointConfig):
        self.endpoint = endpoint
        self.calls = 0

    def _ask(self, prompt: str) -> str:
        self.calls += 1
        try:
            reply = scorer.remote_call(self.endpoint, prompt)
            return scorer.parse_tagged_text(reply, prompts.PREFERENCE_TAG)
        except (RemoteEndpointError, ProtocolError, ScoreParseError) as exc:
            raise SummarizationError(str(exc)) from exc

    def summarize(self, profiles: list[ItemProfile]) -> str:
        if not profiles:
            raise SummarizationError("no profiles to summarize")
        return self._ask(prompts.render_summary_prompt(profiles))

    def revise(self, text: str, profile: ItemProfile, kind: str) -> str:
        if kind == KIND_FP:
            return self._ask(prompts.render_removal_prompt(text, profile))
        if kind == KIND_FN:
            return self._ask(prompts.render_addition_prompt(text, profile))
        raise ValidationError(f"unknown revision kind {kind!r}")


def summarize_preference(editor, user: int, profiles: list[ItemProfile]) -> UserPreference:
    """Version-1 preference from the user's interacted item profiles."""
    text = editor.summarize(profiles)
    return UserPreference(
        user=user, text=text, version=1, history=(PreferenceEvent(version=1, kind=KIND_INIT),)
    )


def update_preference(editor, pref: UserPreference, profile: ItemProfile, kind: str) -> UserPreference:
    """One refinement step: returns the next version with the edit applied
    and recorded. On editor failure the exception propagates and the old
    preference stays valid."""
    text = editor.revise(pref.text, profile, kind)
    version = pref.version + 1
    return UserPreference(
        user=pref.user,
        text=text,
        version=version,
        history=pref.history + (PreferenceEvent(version=version, kind=kind, item=profile.item),),
    )


def detect_fp_fn(
    pos_pairs: list[tuple[int, int]],
    pos_variances: np.ndarray,
    neg_pairs: list[tuple[int, int]],
    neg_variances: np.ndarray,
    count: int,
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Flag suspected mislabeled pairs for this epoch.

    False-positive flags: the ``count`` positives with the smallest
    variance. False-negative flags: the ``count`` negatives with the
    largest variance. Ties resolve toward the lower pair index so the
    result is reproducible. ``count`` is clipped to each population.
    """
    if count < 0:
        raise ValidationError("count must be >= 0")
    pos_variances = np.asarray(pos_variances, dtype=float)
    neg_variances = np.asarray(neg_variances, dtype=float)
    if len(pos_pairs) != pos_variances.shape[0] or len(neg_pairs) != neg_variances.shape[0]:
        raise ValidationError("pairs and variances must align")
    fp_order = np.argsort(pos_variances, kind="stable")
    fn_order = np.argsort(-neg_variances, kind="stable")
    fp = [pos_pairs[k] for k in fp_order[: min(count, len(pos_pairs))]]
    fn = [neg_pairs[k] for k in fn_order[: min(count, len(neg_pairs))]]
    return fp, fn


class ConfidenceCounters:
    """Per-pair flag counters with once-per-run consumption.

    A pair whose counter reaches eps_gamma shows up in the confident list
    exactly until it is consumed; after that it never triggers again for
    the same kind, however often it keeps being flagged.
    """

    def __init__(self):
        self.counts: dict[str, dict[tuple[int, int], int]] = {KIND_FP: {}, KIND_FN: {}}
        self.consumed: dict[str, set[tuple[int, int]]] = {KIND_FP: set(), KIND_FN: set()}

    def update(self, fp_flags, fn_flags) -> None:
        for kind, flags in ((KIND_FP, fp_flags), (KIND_FN, fn_flags)):
            table = self.counts[kind]
            for pair in flags:
                table[pair] = table.get(pair, 0) + 1

    def confident(self, eps_gamma: int, kind: str) -> list[tuple[int, int]]:
        table = self.counts[kind]
        done = self.consumed[kind]
        return sorted(p for p, c in table.items() if c >= eps_gamma and p not in done)

    def consume(self, pair: tuple[int, int], kind: str) -> None:
        self.consumed[kind].add(pair)


class PreferenceStore:
    """JSONL log of every preference version, resumable across runs.

    Records are {user, version, text, trigger} where trigger is
    {kind, item}. Loading replays the log, keeping the latest version per
    user. A path of None keeps everything in memory only.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._latest: dict[int, UserPreference] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        history: dict[int, list[PreferenceEvent]] = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                user = int(record["user"])
                event = PreferenceEvent(
                    version=int(record["version"]),
                    kind=record["trigger"]["kind"],
                    item=record["trigger"].get("item"),
                )
                history.setdefault(user, []).append(event)
                self._latest[user] = UserPreference(
                    user=user,
                    text=record["text"],
                    version=event.version,
                    history=tuple(history[user]),
                )

    def get(self, user: int) -> UserPreference | None:
        return self._latest.get(user)

    def put(self, pref: UserPreference) -> None:
        previous = self._latest.get(pref.user)
        if previous is not None and pref.version <= previous.version:
            raise ValidationError(
                f"preference version for user {pref.user} must grow, "
                f"got {pref.version} after {previous.version}"
            )
        self._latest[pref.user] = pref
        if self.path is not None:
            event = pref.history[-1]
            record = {
                "user": pref.user,
                "version": pref.version,
                "text": pref.text,
                "trigger": {"kind": event.kind, "item": event.item},
            }
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._latest)


class PreferenceBook:
    """What the trainer actually talks to: lazy summaries, epoch-scoped
    failure backoff and a single place that applies confident updates."""

    def __init__(self, editor, store: PreferenceStore, profiles: dict[int, ItemProfile],
                 user_items: dict[int, list[int]], max_profiles: int = 30):
        self.editor = editor
        self.store = store
        self.profiles = profiles
        self.user_items = user_items
        self.max_profiles = max_profiles
        self._failed_epoch: dict[int, int] = {}
        self.summary_failures = 0
        self.update_failures = 0

    def _summary_profiles(self, user: int) -> list[ItemProfile]:
        items = self.user_items.get(user, [])
        got = [self.profiles[i] for i in items if i in self.profiles]
        return got[: self.max_profiles]

    def ensure(self, user: int, epoch: int) -> UserPreference | None:
        """Current preference, summarizing on first need. After a failure
        the user sits out the rest of the epoch, then retries."""
        pref = self.store.get(user)
        if pref is not None:
            return pref
        if self._failed_epoch.get(user) == epoch:
            return None
        profiles = self._summary_profiles(user)
        if not profiles:
            self._failed_epoch[user] = epoch
            return None
        try:
            pref = summarize_preference(self.editor, user, profiles)
        except SummarizationError:
            self.summary_failures += 1
            self._failed_epoch[user] = epoch
            return None
        self.store.put(pref)
        return pref

    def apply_update(self, user: int, item: int, kind: str, epoch: int) -> bool:
        """One confident FP or FN edit. Returns True when the new version
        was stored; False leaves the old text in place."""
        pref = self.ensure(user, epoch)
        profile = self.profiles.get(item)
        if pref is None or profile is None:
            return False
        try:
            updated = update_preference(self.editor, pref, profile, kind)
        except SummarizationError:
            self.update_failures += 1
            return False
        self.store.put(updated)
        return True
