"""Run configuration: one flat dict of knobs, hashed per pipeline stage."""

from __future__ import annotations

import json
from pathlib import Path

from ..numerics.checkpoint import config_hash

DEFAULTS: dict = {
    # data
    "task": "reach",
    "n_demos": 30,
    "noise_level": 0.0,
    "demo_seed": 0,
    "val_frac": 0.1,
    # shared optimisation
    "seed": 0,
    "lr": 1e-4,
    "weight_decay": 1e-4,
    "ema_decay": 0.95,
    "grad_clip": 1.0,
    "batch_size": 96,
    # windows
    "obs_history": 2,
    "chunk": 4,
    "horizon": 16,
    # latent model
    "d_z": 16,
    "d_h": 64,
    "d_x": 32,
    "dec_hidden": [64, 64],
    "kl_weight": 1e-3,
    "kl_warmup": 0.1,
    "smooth_weight": 1e-2,
    "latent_epochs": 150,
    # flow
    "policy": "latent-flow",
    "flow_hidden": [256, 256],
    "time_dim": 32,
    "consistency_weight": 1.0,
    "consistency_delta": 0.1,
    "gen_time": 0.0,
    "epochs": 150,
    "reflow_epochs": 0,
    "reflow_steps": 32,
    # geometry
    "n_points": 512,
    "n_centers": 16,
    "n_neighbors": 16,
    "d_fl": 64,
    "d_fc": 32,
    # evaluation
    "eval_seeds": [0, 1, 2],
    "eval_trials": 20,
    "fc_ratio": 0.25,
}

SECTIONS: dict[str, tuple[str, ...]] = {
    "demos": ("task", "n_demos", "noise_level", "demo_seed"),
    "latent": ("val_frac", "seed", "lr", "weight_decay", "ema_decay", "grad_clip", "batch_size", "obs_history",
               "chunk", "horizon", "d_z", "d_h", "d_x", "dec_hidden", "kl_weight", "kl_warmup", "smooth_weight",
               "latent_epochs", "n_points", "n_centers", "n_neighbors"),
    "flow": ("policy", "flow_hidden", "time_dim", "consistency_weight", "consistency_delta", "gen_time", "epochs",
             "reflow_epochs", "reflow_steps", "d_fl", "d_fc"),
    "eval": ("eval_seeds", "eval_trials", "fc_ratio"),
}
ORDER = ("demos", "latent", "flow", "eval")


def make_config(overrides: dict | None = None, path=None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(json.loads(Path(path).read_text()))
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    if cfg["horizon"] % cfg["chunk"]:
        raise ValueError("horizon must be a multiple of chunk")
    if cfg["policy"] not in ("latent-flow", "raw-flow"):
        raise ValueError(f"unknown policy {cfg['policy']!r}")
    return cfg


def stage_config(cfg: dict, stage: str) -> dict:
    """Keys that determine ``stage`` and everything upstream of it.

    The raw-flow baseline does not depend on the latent model, so the latent
    knobs that only shape stage 1 drop out of its flow/eval hashes.
    """
    keys: list[str] = []
    for s in ORDER[: ORDER.index(stage) + 1]:
        keys.extend(SECTIONS[s])
    sub = {k: cfg[k] for k in keys}
    if stage in ("flow", "eval") and cfg["policy"] == "raw-flow":
        for k in ("d_z", "d_h", "d_x", "dec_hidden", "kl_weight", "kl_warmup", "smooth_weight", "latent_epochs"):
            sub.pop(k, None)
    return sub


def stage_hash(cfg: dict, stage: str) -> str:
    return config_hash(stage_config(cfg, stage))


def stage_dir(root, cfg: dict, stage: str) -> Path:
    tag = cfg["task"] if stage in ("demos", "latent") else f"{cfg['task']}-{cfg['policy']}"
    return Path(root) / stage / f"{tag}-{stage_hash(cfg, stage)}"
