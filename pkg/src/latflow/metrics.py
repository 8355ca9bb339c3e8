"""Trajectory smoothness, success aggregation and inference latency."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

ALPHA = 0.25
BETA = 0.75


def _as_2d(traj) -> np.ndarray:
    a = np.asarray(traj, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def jerk(traj, dt: float) -> np.ndarray:
    """Third-order finite difference (a[t+1] - 3a[t] + 3a[t-1] - a[t-2]) / dt^3.

    Returns one row per index with the full stencil available: T - 3 rows.
    """
    a = _as_2d(traj)
    if a.shape[0] < 4:
        raise ValueError(f"jerk needs T >= 4, got {a.shape[0]}")
    # grouped as differences so constant inputs give exactly zero
    return ((a[3:] - a[:-3]) - 3.0 * (a[2:-1] - a[1:-2])) / dt**3


def s_jerk(traj, dt: float) -> float:
    """Sum of squared jerk norms over the valid range, divided by T - 2."""
    a = _as_2d(traj)
    j = jerk(a, dt)
    return float((j * j).sum() / (a.shape[0] - 2))


def default_cutoff(dt: float, ratio: float = 0.25) -> float:
    return ratio * 0.5 / dt


def s_freq(traj, dt: float, f_c: float | None = None) -> float:
    """Fraction of non-DC spectral energy strictly above ``f_c`` (Hz).

    Each dimension has its mean removed before the DFT; energies are summed over
    dimensions. Zero total energy gives 0.
    """
    a = _as_2d(traj)
    T = a.shape[0]
    if T < 8:
        raise ValueError(f"s_freq needs T >= 8, got {T}")
    nyq = 0.5 / dt
    f_c = default_cutoff(dt) if f_c is None else f_c
    if not 0.0 < f_c < nyq:
        raise ValueError(f"cutoff {f_c} must lie in (0, {nyq})")
    spec = np.fft.rfft(a - a.mean(axis=0), axis=0)
    energy = (spec.real**2 + spec.imag**2).sum(axis=1)
    # one-sided bins stand for two full-spectrum bins, except DC and Nyquist
    weight = np.full(energy.shape, 2.0)
    weight[0] = 0.0
    if T % 2 == 0:
        weight[-1] = 1.0
    energy = energy * weight
    total = energy.sum()
    if total <= 1e-300:
        return 0.0
    freqs = np.fft.rfftfreq(T, d=dt)
    return float(min(1.0, energy[freqs > f_c].sum() / total))


@dataclass
class SmoothnessReport:
    s_jerk: float
    s_freq: float
    s_smooth: float
    j_ref: float
    f_c: float
    dt: float
    alpha: float = ALPHA
    beta: float = BETA

    def as_dict(self) -> dict:
        return asdict(self)


def combine(jerk_value: float, freq_value: float, j_ref: float) -> float:
    """alpha * (1 - exp(-s_jerk / j_ref)) + beta * s_freq."""
    if j_ref <= 0:
        raise ValueError("j_ref must be positive")
    return ALPHA * (1.0 - math.exp(-jerk_value / j_ref)) + BETA * freq_value


def s_smooth(traj, dt: float, f_c: float | None = None, j_ref: float = 1.0) -> SmoothnessReport:
    f_c = default_cutoff(dt) if f_c is None else f_c
    sj = s_jerk(traj, dt)
    sf = s_freq(traj, dt, f_c)
    return SmoothnessReport(sj, sf, combine(sj, sf, j_ref), j_ref, f_c, dt)


def reference_jerk(trajectories: Sequence[np.ndarray], dt: float) -> float:
    """Median s_jerk over a set of (expert) trajectories."""
    vals = [s_jerk(t, dt) for t in trajectories if len(t) >= 4]
    if not vals:
        raise ValueError("no trajectory long enough for a jerk reference")
    ref = float(np.median(vals))
    return ref if ref > 0 else 1.0


# ----------------------------------------------------------------- latency


def measure_response_time(
    policy: Callable[..., object],
    observation: tuple,
    warmup: int = 10,
    calls: int = 100,
) -> dict[str, float]:
    """Wall-clock milliseconds of ``policy(*observation)`` after discarded warm-up calls."""
    for _ in range(warmup):
        policy(*observation)
    samples = []
    for _ in range(calls):
        t0 = time.perf_counter()
        policy(*observation)
        samples.append((time.perf_counter() - t0) * 1e3)
    return latency_stats(samples)


def latency_stats(samples_ms: Sequence[float]) -> dict[str, float]:
    s = np.asarray(samples_ms, dtype=np.float64)
    return {
        "mean": float(s.mean()),
        "median": float(np.median(s)),
        "p50": float(np.percentile(s, 50)),
        "p95": float(np.percentile(s, 95)),
        "n": int(s.size),
    }


# ------------------------------------------------------------- aggregation


@dataclass
class Trial:
    seed: int
    success: bool
    latencies_ms: list[float] = field(default_factory=list)
    smoothness: SmoothnessReport | None = None


@dataclass
class EvalSummary:
    per_seed_success: dict[int, tuple[int, int]]
    success_mean: float
    success_std: float
    single_seed: bool
    latency: dict[str, float]
    smoothness: list[SmoothnessReport]

    @property
    def mean_smooth(self) -> float:
        vals = [r.s_smooth for r in self.smoothness]
        return float(np.mean(vals)) if vals else float("nan")


def aggregate_eval(trials: Sequence[Trial]) -> EvalSummary:
    """Success mean and sample std (percent) across seeds; latency pooled over all inferences."""
    if not trials:
        raise ValueError("no trials to aggregate")
    counts: dict[int, list[int]] = {}
    for tr in trials:
        c = counts.setdefault(tr.seed, [0, 0])
        c[0] += int(bool(tr.success))
        c[1] += 1
    rates = [100.0 * s / n for s, n in counts.values()]
    single = len(rates) == 1
    std = 0.0 if single else statistics.stdev(rates)
    lat = [x for tr in trials for x in tr.latencies_ms]
    return EvalSummary(
        per_seed_success={k: (v[0], v[1]) for k, v in sorted(counts.items())},
        success_mean=float(np.mean(rates)),
        success_std=float(std),
        single_seed=single,
        latency=latency_stats(lat) if lat else {},
        smoothness=[tr.smoothness for tr in trials if tr.smoothness is not None],
    )
