"""Command-line interface.

Subcommands: ingest (filter and re-index raw files), synth (generate a
synthetic world), train (one run), evaluate (rank with a checkpoint),
noise-sweep (robustness grid over injected noise ratios) and trace
(memorization-pattern curves). Report paths write delimited data plus a
rendered figure side by side.

Exit codes: 0 success, 1 bad input or config, 2 runtime failure, 3 the
remote scoring endpoint could not be reached.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import backbone, config as cfgmod, data as datamod, evaluation, pipeline, plots, synth, trainer
from .errors import HardsiftError, RemoteEndpointError, ValidationError

SWEEP_METHODS = {
    "vanilla": trainer.Ablation.vanilla(),
    "loss-drop": trainer.Ablation.loss_drop(),
    "full": trainer.Ablation(),
}


def _cmd_ingest(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = datamod.read_interaction_rows(args.interactions, delimiter=args.delimiter)
    dataset, user_map, item_map = datamod.index_interactions(rows, min_rating=args.min_rating)

    # keep the filtered-out low ratings around as a noise pool
    pool_rows = []
    if args.min_rating is not None:
        for user, item, rating in rows:
            if rating is not None and rating < args.min_rating:
                pool_rows.append((user, item, rating))

    if args.kcore:
        before = dataset
        survivors_u, survivors_i = datamod._kcore_keep(before, args.kcore)
        dataset = datamod.kcore_filter(before, args.kcore)
        user_map = {
            orig: rank for rank, (orig, _) in enumerate(
                sorted(((o, d) for o, d in user_map.items() if d in survivors_u),
                       key=lambda t: t[1])
            )
        }
        item_map = {
            orig: rank for rank, (orig, _) in enumerate(
                sorted(((o, d) for o, d in item_map.items() if d in survivors_i),
                       key=lambda t: t[1])
            )
        }

    datamod.write_interactions(dataset, out / "interactions.tsv")
    datamod.write_id_maps(user_map, item_map, out)

    pool_kept = 0
    with open(out / "noise_pool.tsv", "w", encoding="utf-8") as fh:
        for user, item, rating in pool_rows:
            if user in user_map and item in item_map:
                value = int(rating) if float(rating).is_integer() else rating
                fh.write(f"{user_map[user]}\t{item_map[item]}\t{value}\n")
                pool_kept += 1

    stats = {
        "interactions": len(dataset.interactions),
        "users": dataset.user_count,
        "items": dataset.item_count,
        "noise_pool": pool_kept,
    }
    if args.profiles:
        profiles = datamod.load_item_profiles(args.profiles, item_map=item_map)
        datamod.write_item_profiles(profiles, out / "profiles.jsonl")
        stats["profiles"] = len(profiles)
        stats["items_without_profile"] = len(datamod.missing_items(dataset, profiles))
    with open(out / "ingest.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"ingested {stats['interactions']} interactions "
          f"({stats['users']} users, {stats['items']} items) -> {out}")
    return 0


def _cmd_synth(args) -> int:
    world = synth.generate_world(
        users=args.users,
        items=args.items,
        dim=args.dim,
        positives_per_user=args.positives,
        noise_ratio=args.noise,
        seed=args.seed,
    )
    synth.save_world(world, args.out)
    planted = len(world.dataset.planted_pairs())
    print(f"world with {args.users} users x {args.items} items, "
          f"{len(world.dataset.interactions)} interactions ({planted} planted noisy) -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = cfgmod.load_config_file(args.config)
    out = args.out or cfg.get("output")
    if out is None:
        raise ValidationError("no output directory: set --out or the config's output key")
    ablation = cfgmod.parse_ablation_flags(args.ablation) if args.ablation is not None else None
    _, report, _ = pipeline.run_training(
        cfg, out, seed=args.seed, ablation=ablation, scorer_name=args.scorer
    )
    final = report.final or {}
    test = final.get("test", {})
    ndcg10 = test.get("ndcg", {}).get("10")
    summary = f"trained {final.get('epochs_trained')} epochs"
    if ndcg10 is not None:
        summary += f", test NDCG@10 {ndcg10:.4f}"
    print(f"{summary} -> {out}")
    return 0


def _cmd_evaluate(args) -> int:
    checkpoint = Path(args.checkpoint)
    model = backbone.load_checkpoint(checkpoint)
    config_path = Path(args.config) if args.config else checkpoint.parent / "config.json"
    if not config_path.exists():
        raise ValidationError(
            f"no config snapshot found at {config_path}; pass --config explicitly"
        )
    with open(config_path, encoding="utf-8") as fh:
        snapshot = json.load(fh)
    cfg = snapshot.get("config_file", snapshot)
    cfgmod.validate_config(cfg)
    seed = snapshot.get("resolved_run", {}).get("seed", cfg.get("run", {}).get("seed", 0))
    split_data, _, _ = pipeline.build_split(cfg, seed)
    if model.kind == backbone.LIGHTGCN_LITE:
        backbone.propagate(model, backbone.build_graph(split_data.train))

    ks = tuple(int(k) for k in args.k.split(","))
    result = evaluation.evaluate_split(model, split_data, args.split, ks=ks)
    payload = result.as_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _sweep_run(job) -> dict:
    cfg, out_dir, ratio, seed, method = job
    cfg = json.loads(json.dumps(cfg))  # deep copy, keeps workers independent
    section = cfg.setdefault("data", {})
    noise = dict(section.get("noise") or {})
    noise["ratio"] = ratio
    noise.setdefault("source", "synthetic_low_affinity")
    section["noise"] = noise
    _, report, _ = pipeline.run_training(
        cfg, out_dir, seed=seed, ablation=SWEEP_METHODS[method]
    )
    test = (report.final or {}).get("test", {})
    return {
        "ratio": ratio,
        "seed": seed,
        "method": method,
        "ndcg10": test.get("ndcg", {}).get("10"),
        "recall10": test.get("recall", {}).get("10"),
    }


def _cmd_noise_sweep(args) -> int:
    cfg = cfgmod.load_config_file(args.config)
    out = Path(args.out or cfg.get("output") or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    ratios = [float(r) for r in args.ratios.split(",")]
    methods = [m.strip() for m in args.methods.split(",")]
    for method in methods:
        if method not in SWEEP_METHODS:
            raise ValidationError(
                f"unknown sweep method {method!r}, expected one of {sorted(SWEEP_METHODS)}"
            )

    jobs = []
    for ratio in ratios:
        for seed in range(args.seeds):
            for method in methods:
                run_dir = out / "runs" / f"ratio{ratio:g}_seed{seed}_{method}"
                jobs.append((cfg, str(run_dir), ratio, seed, method))

    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_run, jobs))
    else:
        rows = []
        for job in jobs:
            row = _sweep_run(job)
            print(f"ratio {row['ratio']:g} seed {row['seed']} {row['method']}: "
                  f"NDCG@10 {row['ndcg10']:.4f}")
            rows.append(row)

    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["ratio", "seed", "method", "ndcg10", "recall10"])
        writer.writeheader()
        writer.writerows(rows)
    plots.plot_noise_sweep(rows, out / "figures" / "noise_sweep.png")

    means: dict = {}
    for row in rows:
        means.setdefault(row["method"], {}).setdefault(row["ratio"], []).append(row["ndcg10"])
    summary = {
        method: {str(ratio): sum(v) / len(v) for ratio, v in sorted(by_ratio.items())}
        for method, by_ratio in means.items()
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"sweep of {len(rows)} runs -> {out}")
    return 0


def _cmd_trace(args) -> int:
    cfg = cfgmod.load_config_file(args.config)
    out = Path(args.out or cfg.get("output") or "trace")
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    run_section = cfg.get("run", {})
    seed = args.seed if args.seed is not None else run_section.get("seed", 0)
    split_data, _, _ = pipeline.build_split(cfg, seed)
    d_values = tuple(int(d) for d in args.d.split(","))
    rows = evaluation.pattern_trace(
        split_data,
        d_values=d_values,
        dim=run_section.get("dim", 16),
        epochs=args.epochs,
        learning_rate=run_section.get("learning_rate", 0.005),
        l2=run_section.get("l2", 1e-4),
        batch_size=run_section.get("batch_size", 1024),
        seed=seed,
    )
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "class", "mean_loss", "mean_score"])
        writer.writeheader()
        writer.writerows(rows)
    plots.plot_pattern_trace(rows, out / "figures" / "pattern_trace.png")
    print(f"trace with {len(rows)} rows -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hardsift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="filter, dedup and re-index raw interaction files")
    p.add_argument("--interactions", required=True)
    p.add_argument("--profiles")
    p.add_argument("--min-rating", type=float, default=None)
    p.add_argument("--kcore", type=int, default=None)
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic world with planted noise")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--positives", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("train", help="one training run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablation", default=None,
                   help="comma list of stages to enable: LD,VS,RS,LMS,PU (empty = vanilla)")
    p.add_argument("--scorer", choices=cfgmod.SCORER_BACKENDS, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("evaluate", help="rank with a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--k", default="5,10")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("noise-sweep", help="method comparison across injected noise ratios")
    p.add_argument("--config", required=True)
    p.add_argument("--ratios", default="0.05,0.10,0.15,0.20")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--methods", default="vanilla,loss-drop,full")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_noise_sweep)

    p = sub.add_parser("trace", help="loss/score curves for easy, hard and noisy samples")
    p.add_argument("--config", required=True)
    p.add_argument("--d", default="1,3", help="candidate counts, e.g. 1,3")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RemoteEndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return 3
    except HardsiftError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI must map everything to a code
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
