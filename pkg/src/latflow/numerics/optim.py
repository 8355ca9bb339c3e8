"""AdamW, EMA shadow weights, gradient clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


def clip_grad_norm(grads: dict, max_norm: float = 1.0) -> float:
    """Rescale ``grads`` in place to global L2 norm <= max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                raise KeyError(f"no gradient for parameter {p.name or p}")
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            g = grads[p]
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - self.lr * self.weight_decay * p.data - self.lr * update

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.step_count)}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"])
            self.v[i] = np.array(state[f"v.{i}"])


def adamw_step(opt: AdamW, grads: dict) -> list[np.ndarray]:
    opt.step(grads)
    return [p.data for p in opt.params]


def ema_update(shadow: np.ndarray, params: np.ndarray, decay: float = 0.95) -> np.ndarray:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
    if np.shape(shadow) != np.shape(params):
        raise ValueError("EMA shadow and parameter shapes differ")
    return decay * shadow + (1.0 - decay) * params


class EMA:
    """Exponential moving average of a parameter list."""

    def __init__(self, params: list[Parameter], decay: float = 0.95):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.copy() for p in self.params]

    def update(self) -> None:
        for i, p in enumerate(self.params):
            self.shadow[i] = ema_update(self.shadow[i], p.data, self.decay)

    def swap(self) -> None:
        """Exchange live and shadow weights (call twice to undo)."""
        for i, p in enumerate(self.params):
            p.data, self.shadow[i] = self.shadow[i], p.data

    def copy_to(self) -> None:
        for i, p in enumerate(self.params):
            p.data = self.shadow[i].copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"shadow.{i}": s for i, s in enumerate(self.shadow)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.shadow = [np.array(state[f"shadow.{i}"]) for i in range(len(self.params))]
