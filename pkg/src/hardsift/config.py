"""Run configuration files.

Configs are YAML with named sections: ``data`` (where interactions come
from), ``run`` (trainer settings, including the ablation block),
``schedule`` (denoising thresholds), ``scorer`` (backend and endpoint) and
``output``. Unknown keys fail fast with the offending dotted path, so a
typo never silently falls back to a default. Secrets are never read from
the file: the endpoint's auth token comes from the environment variable
the config merely names.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .denoise import ScheduleConfig
from .errors import ValidationError
from .scorer import EndpointConfig
from .trainer import Ablation, RunConfig

_DATA_KEYS = {
    "kind", "users", "items", "dim", "positives_per_user", "noise_ratio",
    "world_seed", "path", "interactions", "profiles", "min_rating", "kcore",
    "delimiter", "ratios", "min_positives", "on_small", "noise",
}
_NOISE_KEYS = {"ratio", "source", "pool"}
_RUN_KEYS = {
    "mode", "backbone", "dim", "layers", "learning_rate", "l2", "optimizer",
    "batch_size", "max_epochs", "early_stop_patience", "seed",
    "scorer_parallelism", "pointwise_rescue_literal", "max_profiles_per_summary",
    "ablation",
}
_ABLATION_KEYS = {"ld", "selection", "lms", "pu"}
_SCHEDULE_KEYS = {
    "alpha", "eps_l_max", "eps_v", "eps_pos_max", "eps_pos_min", "eps_neg_max",
    "eps_neg_min", "eps_pair_max", "eps_pair_min", "m", "eps_gamma",
}
_SCORER_KEYS = {"backend", "cache_path", "endpoint"}
_ENDPOINT_KEYS = {
    "base_url", "model_name", "temperature", "timeout", "max_retries",
    "auth_env", "backoff_base", "system_prompt",
}
_TOP_KEYS = {"data", "run", "schedule", "scorer", "output"}

SCORER_BACKENDS = ("oracle", "remote", "cached-remote")


def _check_keys(section: dict, allowed: set[str], prefix: str) -> None:
    if not isinstance(section, dict):
        raise ValidationError(f"config section {prefix or 'top level'} must be a mapping")
    for key in section:
        if key not in allowed:
            dotted = f"{prefix}.{key}" if prefix else str(key)
            raise ValidationError(f"unknown config key: {dotted}")


def validate_config(cfg: dict) -> None:
    _check_keys(cfg, _TOP_KEYS, "")
    if "data" in cfg:
        _check_keys(cfg["data"], _DATA_KEYS, "data")
        if isinstance(cfg["data"], dict) and "noise" in cfg["data"]:
            _check_keys(cfg["data"]["noise"], _NOISE_KEYS, "data.noise")
    if "run" in cfg:
        _check_keys(cfg["run"], _RUN_KEYS, "run")
        if isinstance(cfg["run"], dict) and "ablation" in cfg["run"]:
            _check_keys(cfg["run"]["ablation"], _ABLATION_KEYS, "run.ablation")
    if "schedule" in cfg:
        _check_keys(cfg["schedule"], _SCHEDULE_KEYS, "schedule")
    if "scorer" in cfg:
        _check_keys(cfg["scorer"], _SCORER_KEYS, "scorer")
        backend = cfg["scorer"].get("backend")
        if backend is not None and backend not in SCORER_BACKENDS:
            raise ValidationError(
                f"unknown scorer.backend {backend!r}, expected one of {list(SCORER_BACKENDS)}"
            )
        if isinstance(cfg["scorer"], dict) and "endpoint" in cfg["scorer"]:
            _check_keys(cfg["scorer"]["endpoint"], _ENDPOINT_KEYS, "scorer.endpoint")
    if "output" in cfg and not isinstance(cfg["output"], str):
        raise ValidationError("output must be a path string")


def load_config_file(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {path} is not valid YAML: {exc}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ValidationError(f"config file {path} must hold a mapping")
    validate_config(cfg)
    return cfg


def parse_ablation_flags(text: str) -> Ablation:
    """Comma list of stage names (LD, VS, RS, LMS, PU) into an Ablation.
    An empty string means everything off (vanilla training)."""
    tokens = [t.strip().upper() for t in text.split(",") if t.strip()]
    known = {"LD", "VS", "RS", "LMS", "PU"}
    for token in tokens:
        if token not in known:
            raise ValidationError(f"unknown ablation stage {token!r}, expected one of {sorted(known)}")
    if "VS" in tokens and "RS" in tokens:
        raise ValidationError("VS and RS are mutually exclusive")
    return Ablation(
        ld="LD" in tokens,
        selection="rs" if "RS" in tokens else "vs",
        lms="LMS" in tokens,
        pu="PU" in tokens,
    )


def make_schedule(cfg: dict) -> ScheduleConfig:
    return ScheduleConfig(**cfg.get("schedule", {}))


def make_ablation(run_section: dict) -> Ablation:
    block = run_section.get("ablation", {})
    return Ablation(**block) if block else Ablation()


def make_run_config(cfg: dict, seed: int | None = None, ablation: Ablation | None = None) -> RunConfig:
    run_section = dict(cfg.get("run", {}))
    ablation_value = ablation if ablation is not None else make_ablation(run_section)
    run_section.pop("ablation", None)
    if seed is not None:
        run_section["seed"] = seed
    try:
        return RunConfig(
            schedule=make_schedule(cfg),
            ablation=ablation_value,
            **run_section,
        )
    except TypeError as exc:
        raise ValidationError(f"bad run section: {exc}") from None


def make_endpoint(cfg: dict) -> EndpointConfig | None:
    block = cfg.get("scorer", {}).get("endpoint")
    if block is None:
        return None
    try:
        return EndpointConfig(**block)
    except TypeError as exc:
        raise ValidationError(f"bad scorer.endpoint section: {exc}") from None


def scorer_backend_name(cfg: dict) -> str:
    name = cfg.get("scorer", {}).get("backend", "oracle")
    if name not in SCORER_BACKENDS:
        raise ValidationError(
            f"unknown scorer backend {name!r}, expected one of {SCORER_BACKENDS}"
        )
    return name
