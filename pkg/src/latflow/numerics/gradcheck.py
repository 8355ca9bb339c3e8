"""Central finite-difference checks against the tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Parameter, Tape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (perturbed in place).

    Returns (flat indices checked, derivative estimates).
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2.0 * h)
    return idx, out


def check_gradients(loss_fn: Callable[[], Tensor], params: list[Parameter], h: float = 1e-5,
                    max_entries: int | None = 40, seed: int = 0) -> float:
    """Max relative error between tape and finite-difference gradients over ``params``."""
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0

    def f() -> float:
        return float(loss_fn().data)

    for p in params:
        idx, num = numeric_grad(f, p.data, h=h, max_entries=max_entries, rng=rng)
        ana = grads[p].reshape(-1)[idx]
        if idx.size:
            worst = max(worst, float(relative_error(ana, num).max()))
    return worst
