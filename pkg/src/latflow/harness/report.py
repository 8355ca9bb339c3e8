"""Side-by-side comparison of evaluated policies, with deltas against a reference policy.

Output schema (``REPORT_SCHEMA`` version 1), all files CSV with one header row:

``comparison.csv``
    task, policy, n_trials, success_mean, success_std, delta_success_pts,
    latency_p50_ms, latency_p95_ms, delta_time_pct, s_smooth_mean,
    s_smooth_std, delta_smooth_pct, expert_success
``comparison_core.csv``
    the same rows without the wall-clock columns (latency_*, delta_time_pct);
    byte-identical across reruns of the same config
``fig_smoothness.csv``
    task, policy, s_smooth_mean, s_smooth_std, s_jerk_mean, s_freq_mean, n
``fig_success.csv``
    task, policy, seed, success_pct
``fig_latency.csv``
    task, policy, p50_ms, p95_ms, mean_ms, n_calls
``fig_traj_<task>.csv``
    policy, step, a0, a1, a2 (executed joint commands of the first trial)

Deltas: success in percentage points, time and smoothness in percent, all
relative to the reference policy of the same task.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numerics.checkpoint import config_hash
from .pipeline import fmt, read_csv, write_csv, write_json

REPORT_SCHEMA = 1
REFERENCE = "raw-flow"

COMPARISON_HEADER = ["task", "policy", "n_trials", "success_mean", "success_std", "delta_success_pts",
                     "latency_p50_ms", "latency_p95_ms", "delta_time_pct", "s_smooth_mean", "s_smooth_std",
                     "delta_smooth_pct", "expert_success"]
WALL_CLOCK = ("latency_p50_ms", "latency_p95_ms", "delta_time_pct")


class ReportError(ValueError):
    pass


@dataclass
class PolicyResult:
    task: str
    policy: str
    trials: list[dict]
    latency_ms: np.ndarray
    expert_success: float
    path: Path

    @property
    def per_seed_success(self) -> dict[int, float]:
        by: dict[int, list[int]] = {}
        for r in self.trials:
            by.setdefault(int(r["seed"]), []).append(int(r["success"]))
        return {s: 100.0 * float(np.mean(v)) for s, v in sorted(by.items())}

    @property
    def success_mean(self) -> float:
        return float(np.mean(list(self.per_seed_success.values())))

    @property
    def success_std(self) -> float:
        rates = list(self.per_seed_success.values())
        return statistics.stdev(rates) if len(rates) > 1 else 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.trials if r[name] != ""])


def load_result(eval_dir) -> PolicyResult:
    eval_dir = Path(eval_dir)
    meta = json.loads((eval_dir / "eval_meta.json").read_text())
    lat = read_csv(eval_dir / "latency.csv")
    return PolicyResult(meta["task"], meta["policy"], read_csv(eval_dir / "trials.csv"),
                        np.array([float(r["ms"]) for r in lat]), meta["expert_success_pct"], eval_dir)


def _pct(x: float, ref: float) -> float:
    return 100.0 * (x - ref) / ref if ref != 0 else 0.0


def comparison_rows(results: list[PolicyResult], reference: str = REFERENCE) -> list[dict]:
    tasks: dict[str, dict[str, PolicyResult]] = {}
    for r in results:
        if r.policy in tasks.setdefault(r.task, {}):
            raise ReportError(f"two evaluations of {r.policy} on {r.task}")
        tasks[r.task][r.policy] = r
    task_sets = {}
    for task, by_policy in tasks.items():
        for p in by_policy:
            task_sets.setdefault(p, set()).add(task)
    if len({frozenset(s) for s in task_sets.values()}) > 1:
        raise ReportError(f"policies were evaluated on different task sets: "
                          f"{ {p: sorted(s) for p, s in sorted(task_sets.items())} }")
    rows = []
    for task in sorted(tasks):
        by_policy = tasks[task]
        if reference not in by_policy:
            raise ReportError(f"reference policy {reference!r} missing for task {task!r}")
        ref = by_policy[reference]
        ref_sm = float(ref.column("s_smooth").mean())
        ref_lat = float(np.median(ref.latency_ms))
        for name in sorted(by_policy, key=lambda p: (p != reference, p)):
            r = by_policy[name]
            sm = r.column("s_smooth")
            p50 = float(np.percentile(r.latency_ms, 50))
            rows.append({
                "task": task,
                "policy": name,
                "n_trials": len(r.trials),
                "success_mean": r.success_mean,
                "success_std": r.success_std,
                "delta_success_pts": r.success_mean - ref.success_mean,
                "latency_p50_ms": p50,
                "latency_p95_ms": float(np.percentile(r.latency_ms, 95)),
                "delta_time_pct": _pct(p50, ref_lat),
                "s_smooth_mean": float(sm.mean()),
                "s_smooth_std": float(sm.std(ddof=1)) if sm.size > 1 else 0.0,
                "delta_smooth_pct": _pct(float(sm.mean()), ref_sm),
                "expert_success": r.expert_success,
            })
    return rows


def write_report(eval_dirs, out_dir=None, root=None, reference: str = REFERENCE, plots: bool = True) -> Path:
    """Comparison table, plot-data CSVs and (optionally) PNG figures for >= 2 evaluations."""
    if len(eval_dirs) < 2:
        raise ReportError("a report needs at least two policy evaluations")
    results = [load_result(d) for d in eval_dirs]
    if out_dir is None:
        key = config_hash({"inputs": sorted(Path(d).name for d in eval_dirs), "reference": reference})
        out_dir = Path(root if root is not None else Path(eval_dirs[0]).parent.parent) / "report" / key
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = comparison_rows(results, reference)
    write_csv(out / "comparison.csv", COMPARISON_HEADER, [[fmt(r[k]) if not isinstance(r[k], str) else r[k]
                                                          for k in COMPARISON_HEADER] for r in rows])
    core = [k for k in COMPARISON_HEADER if k not in WALL_CLOCK]
    write_csv(out / "comparison_core.csv", core,
              [[fmt(r[k]) if not isinstance(r[k], str) else r[k] for k in core] for r in rows])

    fig_rows, succ_rows, lat_rows = [], [], []
    for r in sorted(results, key=lambda r: (r.task, r.policy)):
        sm = r.column("s_smooth")
        fig_rows.append([r.task, r.policy, fmt(sm.mean()), fmt(sm.std(ddof=1) if sm.size > 1 else 0.0),
                         fmt(r.column("s_jerk").mean()), fmt(r.column("s_freq").mean()), sm.size])
        succ_rows.extend([r.task, r.policy, s, fmt(v)] for s, v in r.per_seed_success.items())
        lat_rows.append([r.task, r.policy, fmt(np.percentile(r.latency_ms, 50)), fmt(np.percentile(r.latency_ms, 95)),
                         fmt(r.latency_ms.mean()), r.latency_ms.size])
    write_csv(out / "fig_smoothness.csv",
              ["task", "policy", "s_smooth_mean", "s_smooth_std", "s_jerk_mean", "s_freq_mean", "n"], fig_rows)
    write_csv(out / "fig_success.csv", ["task", "policy", "seed", "success_pct"], succ_rows)
    write_csv(out / "fig_latency.csv", ["task", "policy", "p50_ms", "p95_ms", "mean_ms", "n_calls"], lat_rows)
    for task in sorted({r.task for r in results}):
        traj_rows = []
        for r in sorted((r for r in results if r.task == task), key=lambda r: r.policy):
            first = sorted((r.path / "trajectories").glob("*.csv"))[0]
            for t in read_csv(first):
                traj_rows.append([r.policy, t["step"], t["a0"], t["a1"], t["a2"]])
        write_csv(out / f"fig_traj_{task}.csv", ["policy", "step", "a0", "a1", "a2"], traj_rows)
    write_json(out / "schema.json", {
        "schema_version": REPORT_SCHEMA,
        "reference_policy": reference,
        "comparison_columns": COMPARISON_HEADER,
        "wall_clock_columns": list(WALL_CLOCK),
        "inputs": [Path(d).name for d in eval_dirs],
    })
    if plots:
        from .plots import render_all

        render_all(out)
    return out
