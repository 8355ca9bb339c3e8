"""Closed-loop receding-horizon rollouts of a trained policy."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..metrics import SmoothnessReport, Trial, default_cutoff, s_smooth
from ..numerics.rng import stream
from ..policy import FlowPolicy, scene_points
from ..simenv import DT, ArmEnv, TaskScene, render_point_cloud, sample_scene

log = logging.getLogger(__name__)

EVAL_SCENE_OFFSET = 1_000_000


@dataclass
class Episode:
    scene: TaskScene
    seed: int
    trial: int
    success: bool
    actions: np.ndarray  # executed env-scale commands
    ee: np.ndarray
    q: np.ndarray
    latencies_ms: list[float] = field(default_factory=list)
    flow_evals: int = 0
    decodes: int = 0
    error: str | None = None


def eval_scene(task: str, seed: int, trial: int) -> TaskScene:
    scene_seed = EVAL_SCENE_OFFSET + 1000 * seed + trial
    return sample_scene(task, np.random.default_rng(scene_seed), seed=scene_seed)


def run_episode(policy: FlowPolicy, scene: TaskScene, rng: np.random.Generator, seed: int = 0,
                trial: int = 0) -> Episode:
    cfg = policy.cfg
    env = ArmEnv(scene)
    cloud = render_point_cloud(scene, 1024, np.random.default_rng([scene.seed, 7]))
    pts = scene_points(cloud, cfg)
    hist = [env.observation()] * cfg["obs_history"]
    executed, lat = [], []
    evals0, dec0 = policy.field.n_evals, policy.n_decodes
    error = None
    try:
        while env.t < scene.t_max and not env.success():
            t0 = time.perf_counter()
            chunk = policy.act(np.array(hist[-cfg["obs_history"]:]), pts, env.context(), rng)
            lat.append((time.perf_counter() - t0) * 1e3)
            for a in chunk:
                hist.append(env.step(a))
                executed.append(a)
                if env.t >= scene.t_max or env.success():
                    break
    except Exception as exc:  # an environment failure counts as a failed trial
        log.warning("trial %d/%d failed with %r", seed, trial, exc)
        error = repr(exc)
    return Episode(
        scene, seed, trial, bool(error is None and env.success()), np.array(executed),
        np.array([s.ee for s in env.states]), np.array([s.q for s in env.states]), lat,
        policy.field.n_evals - evals0, policy.n_decodes - dec0, error,
    )


def smoothness_of(actions: np.ndarray, j_ref: float, fc_ratio: float = 0.25, dt: float = DT) -> SmoothnessReport | None:
    """Smoothness of the executed joint commands (gripper channel excluded)."""
    if len(actions) < 8:
        return None
    return s_smooth(actions[:, :3], dt, default_cutoff(dt, fc_ratio), j_ref)


def evaluate_policy(policy: FlowPolicy, task: str, seeds, trials: int, j_ref: float,
                    fc_ratio: float = 0.25) -> tuple[list[Episode], list[Trial]]:
    episodes, records = [], []
    for seed in seeds:
        for k in range(trials):
            scene = eval_scene(task, seed, k)
            rng = stream(seed, f"eval-sampling-{k}")
            ep = run_episode(policy, scene, rng, seed, k)
            episodes.append(ep)
            records.append(Trial(seed, ep.success, ep.latencies_ms, smoothness_of(ep.actions, j_ref, fc_ratio)))
    return episodes, records
