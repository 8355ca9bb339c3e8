"""Consistency flow matching over flattened latent (or raw action) trajectories.

The flow map is ``f(t, z) = z + (1 - t) * v(t, c_in(t) * z)`` with
``c_in(t) = 1 / sqrt(t^2 + (1 - t)^2)``. Training pairs a straight-line flow
matching regression with a two-time self-consistency penalty on the same
path. Generation is a single velocity evaluation at ``t = 0`` on a base draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import film_hierarchical
from .numerics import autodiff as ad
from .numerics.autodiff import NonFiniteError, Parameter, Tensor, no_grad
from .numerics.nn import Linear, Module


def c_in(t):
    """Input scale 1/sqrt(t^2 + (1-t)^2); accepts scalars or arrays in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("c_in is defined for t in [0, 1]")
    out = 1.0 / np.sqrt(t * t + (1.0 - t) ** 2)
    return float(out) if out.ndim == 0 else out


def time_embedding(t: np.ndarray, dim: int = 32, max_freq: float = 1000.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), dim // 2))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class Conditioning:
    """Per-sample conditioning: a flat vector and optional scene point tensors."""

    obs: np.ndarray  # (B, d_o)
    offsets: np.ndarray | None = None  # (S, k, m, 3)
    centers: np.ndarray | None = None  # (S, k, 3)
    scene_idx: np.ndarray | None = None  # (B,) row of each sample's scene; None means S == B

    def __len__(self) -> int:
        return self.obs.shape[0]

    def take(self, idx) -> "Conditioning":
        idx = np.asarray(idx)
        if self.offsets is None:
            return Conditioning(self.obs[idx])
        if self.scene_idx is None:
            return Conditioning(self.obs[idx], self.offsets[idx], self.centers[idx])
        return Conditioning(self.obs[idx], self.offsets, self.centers, self.scene_idx[idx])


class VelocityField(Module):
    """MLP velocity network; every hidden pre-activation gets hierarchical FiLM from the scene."""

    def __init__(
        self,
        dim: int,
        cond_dim: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (256, 256),
        time_dim: int = 32,
        geometry=None,
    ):
        self.dim, self.cond_dim, self.time_dim = dim, cond_dim, time_dim
        sizes = [dim + time_dim + cond_dim, *hidden]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Linear(sizes[-1], dim, rng)
        self.geometry = geometry
        self.n_evals = 0

    def velocity(self, t, x, cond: Conditioning | None, use_scene: bool = True) -> Tensor:
        """Raw network output for already input-scaled states ``x``."""
        x = ad.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state width {x.shape[-1]} != field width {self.dim}")
        B = x.shape[0]
        self.n_evals += 1
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        parts = [x, time_embedding(t, self.time_dim)]
        if self.cond_dim:
            parts.append(cond.obs)
        h = ad.concat(parts, axis=-1)
        mods = None
        if use_scene and self.geometry is not None and cond is not None and cond.offsets is not None:
            mods = self.geometry(cond.offsets, cond.centers)
            if cond.scene_idx is not None:
                mods = [tuple(m[cond.scene_idx] for m in layer) for layer in mods]
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if mods is not None:
                h = film_hierarchical(h, *mods[i])
            h = ad.silu(h)
        return self.out(h)


class ConstantField(Module):
    """Bias-only velocity: v(t, z) = b for every input."""

    def __init__(self, dim: int):
        self.dim = dim
        self.bias = Parameter(np.zeros(dim))
        self.n_evals = 0

    def velocity(self, t, x, cond=None, use_scene: bool = True) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state width {x.shape[-1]} != field width {self.dim}")
        self.n_evals += 1
        return ad.broadcast_to(self.bias, x.shape)


def _col(t: np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=np.float64).reshape(-1, 1)


def flow_apply(field, t, z, cond: Conditioning | None = None) -> Tensor:
    """f(t, z) = z + (1 - t) * v(t, c_in(t) * z)."""
    z = ad.as_tensor(z)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
    scale = _col(c_in(t_arr))
    v = field.velocity(t_arr, z * scale, cond)
    return z + v * (1.0 - _col(t_arr))


def cfm_loss(
    field,
    z: np.ndarray,
    cond: Conditioning | None,
    rng: np.random.Generator,
    consistency_weight: float = 1.0,
    delta: float = 0.1,
    noise: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Straight-path flow matching plus a stop-gradient two-time consistency term.

    ``noise`` supplies paired base samples (used for reflow); otherwise they are
    drawn independently from N(0, I).
    """
    z = np.asarray(z, dtype=np.float64)
    B = z.shape[0]
    z0 = rng.standard_normal(z.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    t = rng.uniform(0.0, 1.0, size=B)
    tc = _col(t)
    xt = tc * z + (1.0 - tc) * z0
    v = field.velocity(t, xt * _col(c_in(t)), cond)
    fm = ad.mean(ad.square(v - (z - z0)))
    parts = {"fm": float(fm.data)}
    total = fm
    if consistency_weight > 0.0:
        t2 = np.minimum(t + delta, 1.0)
        t2c = _col(t2)
        x2 = t2c * z + (1.0 - t2c) * z0
        with no_grad():
            f2 = flow_apply(field, t2, x2, cond).detach()
        f1 = ad.as_tensor(xt) + v * (1.0 - tc)
        cons = ad.mean(ad.square(f1 - f2))
        parts["cons"] = float(cons.data)
        total = total + consistency_weight * cons
    if not np.isfinite(total.data):
        raise NonFiniteError(f"non-finite flow loss {parts}")
    return total, parts


def generate_one_step(field, cond: Conditioning | None, rng: np.random.Generator | None = None,
                      n: int | None = None, noise: np.ndarray | None = None, t_gen: float = 0.0) -> np.ndarray:
    """One velocity evaluation from a base draw: f(t_gen, z~) with t_gen = 0 by default."""
    if noise is None:
        B = n if n is not None else len(cond)
        noise = rng.standard_normal((B, field.dim))
    before = field.n_evals
    with no_grad():
        out = flow_apply(field, t_gen, noise, cond).data
    assert field.n_evals - before == 1, "one-step generation must evaluate the field exactly once"
    return out


def integrate_ode(field, cond: Conditioning | None, steps: int, noise: np.ndarray) -> np.ndarray:
    """Euler integration of dx/dt = v(t, c_in(t) x) from t=0 to 1 in ``steps`` uniform steps."""
    if steps < 1:
        raise ValueError("integrate_ode needs at least one step")
    x = np.array(noise, dtype=np.float64)
    h = 1.0 / steps
    with no_grad():
        for i in range(steps):
            t = i * h
            tb = np.full(x.shape[0], t)
            x = x + h * field.velocity(tb, x * c_in(t), cond).data
    return x


def reflow_pairs(field, cond: Conditioning | None, rng: np.random.Generator, n: int, steps: int = 32,
                 batch: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Base draws and their ODE endpoints under ``field``; retraining on these straightens paths."""
    noise = rng.standard_normal((n, field.dim))
    ends = np.empty_like(noise)
    for s in range(0, n, batch):
        sl = slice(s, min(s + batch, n))
        sub = None if cond is None else cond.take(np.arange(sl.start, sl.stop))
        ends[sl] = integrate_ode(field, sub, steps, noise[sl])
    return noise, ends


def energy_distance(x: np.ndarray, y: np.ndarray, block: int = 2000) -> float:
    """Sample energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic)."""

    def mean_dist(a, b):
        total = 0.0
        for i in range(0, a.shape[0], block):
            d = a[i:i + block, None, :] - b[None, :, :]
            total += np.sqrt((d * d).sum(-1)).sum()
        return total / (a.shape[0] * b.shape[0])

    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
