"""PNG figures drawn from the plot-data CSVs a report writes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import read_csv  # noqa: E402

COLORS = {"latent-flow": "#1f77b4", "raw-flow": "#d62728"}
# fixed metadata keeps PNG bytes stable across runs
PNG_META = {"Software": None}


def _grouped_bars(ax, rows: list[dict], value: str, err: str | None = None):
    tasks = sorted({r["task"] for r in rows})
    policies = sorted({r["policy"] for r in rows})
    width = 0.8 / max(len(policies), 1)
    x = np.arange(len(tasks))
    for i, p in enumerate(policies):
        vals = [next((float(r[value]) for r in rows if r["task"] == t and r["policy"] == p), np.nan) for t in tasks]
        errs = None
        if err is not None:
            errs = [next((float(r[err]) for r in rows if r["task"] == t and r["policy"] == p), 0.0) for t in tasks]
        ax.bar(x + (i - (len(policies) - 1) / 2) * width, vals, width, yerr=errs, capsize=3,
               label=p, color=COLORS.get(p))
    ax.set_xticks(x)
    ax.set_xticklabels(tasks)
    ax.legend(frameon=False)


def plot_smoothness(out: Path) -> Path:
    rows = read_csv(out / "fig_smoothness.csv")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    _grouped_bars(ax, rows, "s_smooth_mean", "s_smooth_std")
    ax.set_ylabel("s_smooth (lower is smoother)")
    return _save(fig, out / "fig_smoothness.png")


def plot_success(out: Path) -> Path:
    rows = read_csv(out / "fig_success.csv")
    agg: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        agg.setdefault((r["task"], r["policy"]), []).append(float(r["success_pct"]))
    table = [{"task": t, "policy": p, "mean": np.mean(v), "std": np.std(v, ddof=1) if len(v) > 1 else 0.0}
             for (t, p), v in agg.items()]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    _grouped_bars(ax, table, "mean", "std")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 105)
    return _save(fig, out / "fig_success.png")


def plot_latency(out: Path) -> Path:
    rows = read_csv(out / "fig_latency.csv")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    _grouped_bars(ax, rows, "p50_ms")
    ax.set_ylabel("response time p50 (ms)")
    return _save(fig, out / "fig_latency.png")


def plot_trajectories(out: Path, task: str) -> Path:
    rows = read_csv(out / f"fig_traj_{task}.csv")
    policies = sorted({r["policy"] for r in rows})
    fig, axes = plt.subplots(3, 1, figsize=(6, 6), sharex=True)
    for p in policies:
        sel = [r for r in rows if r["policy"] == p]
        t = np.array([int(r["step"]) for r in sel])
        for j, ax in enumerate(axes):
            ax.plot(t, [float(r[f"a{j}"]) for r in sel], label=p, color=COLORS.get(p), lw=1.2)
            ax.set_ylabel(f"joint {j} cmd")
    axes[0].legend(frameon=False)
    axes[-1].set_xlabel("step")
    axes[0].set_title(task)
    return _save(fig, out / f"fig_traj_{task}.png")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)
    return path


def render_all(out) -> list[Path]:
    out = Path(out)
    paths = [plot_smoothness(out), plot_success(out), plot_latency(out)]
    for f in sorted(out.glob("fig_traj_*.csv")):
        paths.append(plot_trajectories(out, f.stem[len("fig_traj_"):]))
    return paths
