"""Glue between config files and the library: assemble data, scorer and
trainer, then write the run directory (report, CSV, figures, checkpoint).
The CLI is a thin shell over these functions and tests drive them directly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from . import config as cfgmod
from . import data as datamod
from . import plots, preference, scorer, synth, trainer
from .errors import ValidationError


def build_split(cfg: dict, seed: int):
    """Materialize (split, profiles, world-or-None) from the data section.

    Kinds: ``synthetic`` generates a world inline, ``world`` loads one
    saved by the synth command, ``files`` reads real interaction/profile
    files. The optional ``noise`` block injects planted noise into the
    train side after splitting, leaving valid/test untouched.
    """
    section = cfg.get("data", {})
    kind = section.get("kind", "synthetic")
    ratios = tuple(section.get("ratios", (0.6, 0.2, 0.2)))
    min_positives = section.get("min_positives", 3)
    on_small = section.get("on_small", "error")
    world = None
    pool = None

    if kind == "synthetic":
        world = synth.generate_world(
            users=section.get("users", 100),
            items=section.get("items", 80),
            dim=section.get("dim", 8),
            positives_per_user=section.get("positives_per_user", 12),
            noise_ratio=section.get("noise_ratio", 0.0),
            seed=section.get("world_seed", seed),
        )
        dataset, profiles = world.dataset, world.profiles
    elif kind == "world":
        if "path" not in section:
            raise ValidationError("data.kind 'world' needs data.path")
        world = synth.load_world(section["path"])
        dataset, profiles = world.dataset, world.profiles
    elif kind == "files":
        if "interactions" not in section:
            raise ValidationError("data.kind 'files' needs data.interactions")
        rows = datamod.read_interaction_rows(
            section["interactions"], delimiter=section.get("delimiter", "\t")
        )
        dataset, _, item_map = datamod.index_interactions(
            rows, min_rating=section.get("min_rating")
        )
        if section.get("kcore"):
            # after k-core the dense ids move, so profiles would need to be
            # re-keyed through a fresh map; refuse the combination up front
            if "profiles" in section:
                raise ValidationError(
                    "data.kcore with data.profiles is not supported in one step; "
                    "run ingest first and point at its output"
                )
            dataset = datamod.kcore_filter(dataset, section["kcore"])
        profiles = {}
        if "profiles" in section:
            profiles = datamod.load_item_profiles(section["profiles"], item_map=item_map)
    else:
        raise ValidationError(f"unknown data.kind {kind!r}")

    split_data = datamod.split(
        dataset, ratios=ratios, seed=seed, min_positives=min_positives, on_small=on_small
    )

    noise_block = section.get("noise") or {}
    ratio = noise_block.get("ratio", 0.0)
    if ratio:
        source = noise_block.get("source", "synthetic_low_affinity")
        if source == "rated_below_3":
            if "pool" not in noise_block:
                raise ValidationError("data.noise.source rated_below_3 needs data.noise.pool")
            # pool files already use the dataset's dense ids; re-indexing
            # them here would scramble the correspondence
            pool = []
            for u, i, rating in datamod.read_interaction_rows(noise_block["pool"]):
                try:
                    pool.append(datamod.Interaction(user=int(u), item=int(i), rating=rating))
                except ValueError:
                    raise ValidationError(
                        f"{noise_block['pool']}: pool ids must be dense integers"
                    ) from None
        affinity = world.affinity if world is not None else None
        split_data = datamod.inject_split_noise(
            split_data, ratio, source, seed, pool=pool, affinity=affinity
        )
    return split_data, profiles, world


def build_scorer(cfg: dict, world) -> object | None:
    """Scorer backend from the scorer section. The oracle variant needs a
    synthetic world to read its affinities from."""
    name = cfgmod.scorer_backend_name(cfg)
    if name == "oracle":
        if world is None:
            raise ValidationError("the oracle scorer needs synthetic or world data")
        return scorer.OracleScorer(world.affinity)
    endpoint = cfgmod.make_endpoint(cfg)
    if endpoint is None:
        raise ValidationError(f"scorer backend {name!r} needs scorer.endpoint settings")
    remote = scorer.RemoteScorer(endpoint)
    if name == "remote":
        return remote
    cache_path = cfg.get("scorer", {}).get("cache_path")
    if cache_path is None:
        raise ValidationError("cached-remote needs scorer.cache_path")
    return scorer.CachedScorer(remote, scorer.ScoreCacheStore(cache_path))


def build_editor(cfg: dict):
    name = cfgmod.scorer_backend_name(cfg)
    if name == "oracle":
        return preference.OraclePreferenceEditor()
    endpoint = cfgmod.make_endpoint(cfg)
    if endpoint is None:
        raise ValidationError(f"scorer backend {name!r} needs scorer.endpoint settings")
    return preference.RemotePreferenceEditor(endpoint)


def write_epoch_csv(report: trainer.RunReport, path: Path) -> None:
    fields = ["epoch", "t_end", "mean_loss", "noisy", "candidates", "rescued",
              "trained", "valid_ndcg10", "valid_recall10", "noise_precision",
              "noise_recall", "noise_contamination"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in report.epochs:
            valid = row.get("valid") or {}
            noise = row.get("noise") or {}
            writer.writerow({
                "epoch": row["epoch"],
                "t_end": row["t_end"],
                "mean_loss": row["mean_loss"],
                "noisy": row["noisy"],
                "candidates": row["candidates"],
                "rescued": row["rescued"],
                "trained": row["trained"],
                "valid_ndcg10": valid.get("ndcg", {}).get("10", ""),
                "valid_recall10": valid.get("recall", {}).get("10", ""),
                "noise_precision": noise.get("precision", ""),
                "noise_recall": noise.get("recall", ""),
                "noise_contamination": noise.get("contamination", ""),
            })


def run_training(cfg: dict, out_dir: str | Path, seed: int | None = None,
                 ablation=None, scorer_name: str | None = None) -> tuple:
    """One configured training run with the full run-directory layout:
    config snapshot, per-epoch report.json and epochs.csv, the training
    figure, best checkpoint, timing and, when preferences were touched,
    their JSONL log."""
    cfg = dict(cfg)
    if scorer_name is not None:
        cfg.setdefault("scorer", {})
        cfg["scorer"] = dict(cfg["scorer"], backend=scorer_name)
    run_config = cfgmod.make_run_config(cfg, seed=seed, ablation=ablation)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)

    split_data, profiles, world = build_split(cfg, run_config.seed)
    backend = None
    editor = None
    if run_config.ablation.lms or run_config.ablation.pu:
        backend = build_scorer(cfg, world)
        editor = build_editor(cfg)
    store = preference.PreferenceStore(out / "preferences.jsonl")

    snapshot = {"config_file": cfg, "resolved_run": run_config.as_dict()}
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")

    model, report = trainer.train(
        run_config,
        split_data,
        profiles=profiles,
        scorer_backend=backend,
        editor=editor,
        pref_store=store,
        report_path=out / "report.json",
        checkpoint_dir=out / "checkpoint",
    )
    write_epoch_csv(report, out / "epochs.csv")
    plots.plot_training_curves(report.epochs, out / "figures" / "training.png")
    with open(out / "timing.json", "w", encoding="utf-8") as fh:
        json.dump({"wall_clock_seconds": report.wall_clock_seconds}, fh, indent=2)
        fh.write("\n")
    return model, report, split_data
