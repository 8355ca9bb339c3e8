"""Independent oracles shared by the unit tests and the acceptance gate.

Nothing here calls the library routine it checks: the brute-force geometry
helpers loop in plain Python, and the flow trainers only use the public
training step.
"""

from __future__ import annotations

import math

import numpy as np

from latflow.flow import ConstantField, VelocityField, cfm_loss, energy_distance, generate_one_step, reflow_pairs
from latflow.numerics import AdamW, Tape, clip_grad_norm


def brute_force_fps(points: np.ndarray, k: int, start: int = 0) -> list[int]:
    """Greedy max-min with explicit loops; strict ``>`` keeps the lowest index on ties."""
    pts = [tuple(map(float, p)) for p in points]
    chosen = [start]
    while len(chosen) < k:
        best, best_d = -1, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(math.dist(p, pts[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def brute_force_knn(points: np.ndarray, center: np.ndarray, m: int) -> list[int]:
    d = [(float(np.sum((p - center) ** 2)), i) for i, p in enumerate(points)]
    return [i for _, i in sorted(d)[:m]]


def train_steps(field, sample_batch, steps: int, lr: float, seed: int, batch: int = 256) -> None:
    rng = np.random.default_rng(seed)
    opt = AdamW(field.parameters(), lr=lr, weight_decay=0.0)
    for _ in range(steps):
        z, noise = sample_batch(rng, batch)
        with Tape() as tape:
            loss, _ = cfm_loss(field, z, None, rng, noise=noise)
        grads = tape.backward(loss, field.parameters())
        clip_grad_norm(grads, 1.0)
        opt.step(grads)


def train_gaussian_pair(m: np.ndarray, steps: int = 1500, seed: int = 0) -> ConstantField:
    """Bias-only field trained on base N(0, I) -> target N(m, I)."""
    field = ConstantField(len(m))

    def draw(r, b):
        return m + r.standard_normal((b, len(m))), None

    train_steps(field, draw, steps, lr=0.02, seed=seed)
    # anneal so the bias settles instead of jittering at the coarse step size
    train_steps(field, draw, steps, lr=0.002, seed=seed + 1, batch=1024)
    return field


def mixture_samples(n: int, rng: np.random.Generator) -> np.ndarray:
    """Two well separated 2-D Gaussians at (+-2, 0), std 0.3."""
    comp = rng.integers(0, 2, n)
    centers = np.stack([np.where(comp == 0, -2.0, 2.0), np.zeros(n)], axis=1)
    return centers + 0.3 * rng.standard_normal((n, 2))


def mixture_oracle(n: int = 10_000, steps: int = 3000, seed: int = 0) -> tuple[float, float]:
    """(base-to-target, one-step-to-target) energy distances after training plus one reflow round."""
    field = VelocityField(2, 0, np.random.default_rng(seed + 1), hidden=(64, 64))
    train_steps(field, lambda r, b: (mixture_samples(b, r), None), steps, lr=2e-3, seed=seed)
    noise, ends = reflow_pairs(field, None, np.random.default_rng(seed + 2), 20_000)

    def paired(r, b):
        idx = r.integers(0, len(noise), b)
        return ends[idx], noise[idx]

    train_steps(field, paired, steps, lr=2e-3, seed=seed + 3)
    target = mixture_samples(n, np.random.default_rng(seed + 4))
    base = np.random.default_rng(seed + 5).standard_normal((n, 2))
    samples = generate_one_step(field, None, np.random.default_rng(seed + 6), n=n)
    return energy_distance(base, target), energy_distance(samples, target)
