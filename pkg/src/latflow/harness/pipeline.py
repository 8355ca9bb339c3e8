"""Pipeline stages behind the CLI: demonstrations, the two training stages, evaluation.

Every stage writes into ``<root>/<stage>/<tag>-<hash>/`` where the hash covers
the config keys of that stage and everything upstream (see ``config.stage_hash``).
A stage reads its inputs from the directories its upstream hashes point to.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from ..latent_action import LatentActionModel
from ..metrics import reference_jerk
from ..numerics import MinMaxNormalizer
from ..numerics.autodiff import NonFiniteError
from ..numerics.checkpoint import load_checkpoint, prefixed, save_checkpoint, unprefixed
from ..numerics.rng import stream
from ..policy import (LATENT, RAW, FlowPolicy, build_windows, fit_normalizers, make_policy, recon_mse,
                      train_flow, train_latent)
from ..simenv import DT, Demonstration, generate_demonstrations, run_expert
from .config import stage_config, stage_dir, stage_hash
from .evaluate import evaluate_policy, smoothness_of
from .io import load_demo, save_demo

log = logging.getLogger(__name__)

TRIAL_HEADER = ["task", "policy", "seed", "trial", "s_jerk", "s_freq", "s_smooth", "success",
                "latency_p50_ms", "latency_p95_ms"]
TIMING_COLUMNS = ("latency_p50_ms", "latency_p95_ms")


class TrainingDiverged(RuntimeError):
    pass


def write_csv(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def fmt(x) -> str:
    """Fixed text form for report floats: repr round-trips and is platform stable."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _loss_logger(path: Path, header: list[str]):
    rows: list[list] = []

    def on_epoch(row: dict):
        rows.append([fmt(row.get(k)) if k != "phase" else row.get(k, "") for k in header])
        write_csv(path, header, rows)

    return on_epoch


# ------------------------------------------------------------------ demos


def gen_demos(cfg: dict, root) -> Path:
    out = stage_dir(root, cfg, "demos")
    demos = generate_demonstrations(cfg["task"], cfg["n_demos"], cfg["demo_seed"], cfg["noise_level"])
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, d in enumerate(demos):
        name = f"demo_{i:03d}.json"
        save_demo(d, out / name)
        files.append({"file": name, "seed": d.seed, "steps": d.length})
    write_json(out / "manifest.json", {
        "config": stage_config(cfg, "demos"),
        "config_hash": stage_hash(cfg, "demos"),
        "demos": files,
    })
    log.info("wrote %d %s demonstrations to %s", len(demos), cfg["task"], out)
    return out


def load_demos(cfg: dict, root) -> list[Demonstration]:
    d = stage_dir(root, cfg, "demos")
    manifest = d / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no demonstrations at {d}; run gen-demos with this config first")
    meta = json.loads(manifest.read_text())
    return [load_demo(d / rec["file"]) for rec in meta["demos"]]


def split_demos(n: int, val_frac: float, seed: int) -> tuple[list[int], list[int]]:
    n_val = int(round(val_frac * n)) if n > 1 else 0
    order = stream(seed, "split").permutation(n)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def expert_jerk_reference(demos: list[Demonstration]) -> float:
    return reference_jerk([d.actions[:, :3] for d in demos], DT)


# ----------------------------------------------------------------- stage 1


def _latent_model(cfg: dict, d_a: int, d_v: int, rng=None) -> LatentActionModel:
    return LatentActionModel(d_a, cfg["chunk"], cfg["d_z"], cfg["d_h"], cfg["d_x"], d_v, tuple(cfg["dec_hidden"]),
                             seed_rng=rng)


def train_latent_stage(cfg: dict, root) -> Path:
    out = stage_dir(root, cfg, "latent")
    out.mkdir(parents=True, exist_ok=True)
    demos = load_demos(cfg, root)
    act_norm, obs_norm = fit_normalizers(demos)
    data = build_windows(demos, cfg, act_norm, obs_norm)
    train_ids, val_ids = split_demos(len(demos), cfg["val_frac"], cfg["seed"])
    train, val = data.subset(train_ids), data.subset(val_ids)
    sub_cfg = stage_config(cfg, "latent")
    keep: dict = {}
    log_epoch = _loss_logger(out / "losses.csv",
                             ["epoch", "kl_weight", "recon", "kl", "smooth", "total", "train_recon_eval", "val_recon"])

    def on_epoch(row):
        log_epoch(row)
        _save_latent(out / "last_good.npz", keep, act_norm, obs_norm, sub_cfg, {"epoch": row["epoch"]})

    s = cfg["seed"]
    try:
        vae = train_latent(train, cfg, stream(s, "latent-init"), stream(s, "latent-data"),
                           stream(s, "latent-sampling"), val=val, on_epoch=on_epoch, keep=keep)
    except (NonFiniteError, FloatingPointError) as exc:
        raise TrainingDiverged(f"stage-1 training diverged ({exc}); last good checkpoint: {out / 'last_good.npz'}")
    extra = {
        "param_hash": vae.param_hash(),
        "d_a": int(data.actions.shape[-1]),
        "d_v": int(data.ctx.shape[-1]),
        "train_demos": train_ids,
        "val_demos": val_ids,
        "train_recon": recon_mse(vae, train),
        "val_recon": recon_mse(vae, val) if len(val) else None,
    }
    _save_latent(out / "checkpoint.npz", keep, act_norm, obs_norm, sub_cfg, extra)
    (out / "last_good.npz").unlink(missing_ok=True)
    write_json(out / "config.json", sub_cfg)
    return out


def _save_latent(path, keep, act_norm, obs_norm, sub_cfg, extra):
    arrays = {
        **prefixed("model", keep["model"].state_dict()),
        **prefixed("opt", keep["opt"].state_dict()),
        **prefixed("ema", keep["ema"].state_dict()),
        **prefixed("act_norm", act_norm.state_dict()),
        **prefixed("obs_norm", obs_norm.state_dict()),
    }
    save_checkpoint(path, arrays, sub_cfg, extra)


def load_latent(cfg: dict, root) -> tuple[LatentActionModel, MinMaxNormalizer, MinMaxNormalizer, dict]:
    path = stage_dir(root, cfg, "latent") / "checkpoint.npz"
    if not path.exists():
        raise FileNotFoundError(f"no stage-1 checkpoint at {path}; run train-latent first")
    arrays, meta = load_checkpoint(path, expected_hash=stage_hash(cfg, "latent"))
    act_norm = MinMaxNormalizer.from_state(unprefixed("act_norm", arrays))
    obs_norm = MinMaxNormalizer.from_state(unprefixed("obs_norm", arrays))
    vae = _latent_model(cfg, meta["extra"]["d_a"], meta["extra"]["d_v"])
    vae.load_state_dict(unprefixed("model", arrays))
    if vae.param_hash() != meta["extra"]["param_hash"]:
        raise RuntimeError("stage-1 parameters do not match the recorded hash")
    return vae, act_norm, obs_norm, meta


# ----------------------------------------------------------------- stage 2


def _policy_skeleton(cfg: dict, root, demos: list[Demonstration]):
    act_norm, obs_norm = fit_normalizers(demos)
    vae = None
    if cfg["policy"] == LATENT:
        vae, act_norm, obs_norm, _ = load_latent(cfg, root)
    data = build_windows(demos, cfg, act_norm, obs_norm)
    policy = make_policy(cfg["policy"], data, cfg, stream(cfg["seed"], "flow-init"), act_norm, obs_norm, vae)
    return policy, data


def train_flow_stage(cfg: dict, root) -> Path:
    out = stage_dir(root, cfg, "flow")
    out.mkdir(parents=True, exist_ok=True)
    demos = load_demos(cfg, root)
    policy, data = _policy_skeleton(cfg, root, demos)
    frozen = policy.vae.param_hash() if policy.vae is not None else None
    sub_cfg = stage_config(cfg, "flow")
    keep: dict = {}
    log_epoch = _loss_logger(out / "losses.csv", ["epoch", "phase", "fm", "cons"])

    def on_epoch(row):
        log_epoch(row)
        _save_flow(out / "last_good.npz", policy, keep, sub_cfg, {"epoch": row["epoch"]})

    s = cfg["seed"]
    try:
        train_flow(policy, data, cfg, stream(s, "flow-data"), stream(s, "flow-sampling"), frozen_hash=frozen,
                   on_epoch=on_epoch, keep=keep)
    except (NonFiniteError, FloatingPointError) as exc:
        raise TrainingDiverged(f"flow training diverged ({exc}); last good checkpoint: {out / 'last_good.npz'}")
    _save_flow(out / "checkpoint.npz", policy, keep, sub_cfg, {"frozen_hash": frozen, "kind": policy.kind})
    (out / "last_good.npz").unlink(missing_ok=True)
    write_json(out / "config.json", sub_cfg)
    return out


def _save_flow(path, policy: FlowPolicy, keep: dict, sub_cfg: dict, extra: dict):
    arrays = {
        **prefixed("field", policy.field.state_dict()),
        **prefixed("opt", keep["opt"].state_dict()),
        **prefixed("ema", keep["ema"].state_dict()),
        **prefixed("act_norm", policy.act_norm.state_dict()),
        **prefixed("obs_norm", policy.obs_norm.state_dict()),
    }
    if policy.latent_norm is not None:
        arrays.update(prefixed("latent_norm", policy.latent_norm.state_dict()))
    save_checkpoint(path, arrays, sub_cfg, extra)


def load_policy(cfg: dict, root) -> FlowPolicy:
    path = stage_dir(root, cfg, "flow") / "checkpoint.npz"
    if not path.exists():
        raise FileNotFoundError(f"no flow checkpoint at {path}; run train-flow first")
    arrays, meta = load_checkpoint(path, expected_hash=stage_hash(cfg, "flow"))
    demos = load_demos(cfg, root)
    policy, _ = _policy_skeleton(cfg, root, demos)
    policy.field.load_state_dict(unprefixed("field", arrays))
    if policy.kind == LATENT:
        policy.latent_norm = MinMaxNormalizer.from_state(unprefixed("latent_norm", arrays))
        if policy.vae.param_hash() != meta["extra"]["frozen_hash"]:
            raise RuntimeError("latent model changed since the flow was trained")
    return policy


# ------------------------------------------------------------------ eval


def eval_stage(cfg: dict, root) -> Path:
    out = stage_dir(root, cfg, "eval")
    policy = load_policy(cfg, root)
    demos = load_demos(cfg, root)
    j_ref = expert_jerk_reference(demos)
    episodes, _ = evaluate_policy(policy, cfg["task"], cfg["eval_seeds"], cfg["eval_trials"], j_ref, cfg["fc_ratio"])
    return write_eval(out, cfg, episodes, j_ref)


def write_eval(out: Path, cfg: dict, episodes, j_ref: float) -> Path:
    """Trial tables, raw latency samples, per-trial trajectories and run metadata for one policy."""
    out.mkdir(parents=True, exist_ok=True)
    task, kind = cfg["task"], cfg["policy"]
    rows, core, lat_rows, expert = [], [], [], []
    for ep in episodes:
        sm = smoothness_of(ep.actions, j_ref, cfg["fc_ratio"])
        lat = np.asarray(ep.latencies_ms)
        p50 = float(np.percentile(lat, 50)) if lat.size else None
        p95 = float(np.percentile(lat, 95)) if lat.size else None
        base = [task, kind, ep.seed, ep.trial, fmt(sm and sm.s_jerk), fmt(sm and sm.s_freq),
                fmt(sm and sm.s_smooth), fmt(ep.success)]
        rows.append(base + [fmt(p50), fmt(p95)])
        core.append(base + [len(ep.latencies_ms), ep.flow_evals, ep.decodes, len(ep.actions)])
        lat_rows.extend([ep.seed, ep.trial, i, fmt(v)] for i, v in enumerate(ep.latencies_ms))
        env, _ = run_expert(ep.scene)
        expert.append(env.success())
        traj = [[t, *map(fmt, ep.actions[t]), *map(fmt, ep.q[t]), *map(fmt, ep.ee[t])] for t in range(len(ep.actions))]
        write_csv(out / "trajectories" / f"seed{ep.seed}_trial{ep.trial:03d}.csv",
                  ["step", "a0", "a1", "a2", "a3", "q0", "q1", "q2", "ee_x", "ee_y"], traj)
    write_csv(out / "trials.csv", TRIAL_HEADER, rows)
    write_csv(out / "trials_core.csv", TRIAL_HEADER[:-2] + ["cycles", "flow_evals", "decodes", "steps"], core)
    write_csv(out / "latency.csv", ["seed", "trial", "call", "ms"], lat_rows)
    write_json(out / "eval_meta.json", {
        "config": stage_config(cfg, "eval"),
        "config_hash": stage_hash(cfg, "eval"),
        "task": task,
        "policy": kind,
        "j_ref": j_ref,
        "fc_hz": cfg["fc_ratio"] * 0.5 / DT,
        "expert_success_pct": 100.0 * float(np.mean(expert)),
    })
    return out


__all__ = [
    "RAW", "LATENT", "TRIAL_HEADER", "TrainingDiverged", "eval_stage", "gen_demos", "load_demos", "load_latent",
    "load_policy", "read_csv", "split_demos", "train_flow_stage", "train_latent_stage", "write_csv", "write_eval",
]
