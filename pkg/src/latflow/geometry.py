"""Point-cloud scene conditioning.

Preprocessing (cropping, farthest point sampling, k-NN grouping) is plain
numpy. The two learned branches are:

* a local branch that sees only point offsets inside each neighbourhood, so
  its output ignores any global translation of the scene;
* a center branch that embeds the sampled center coordinates and therefore
  encodes the coarse layout.

Their outputs drive two FiLM generators whose modulations are composed
local-first, center-second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import Tensor
from .numerics.nn import FiLMGenerator, Linear, Module


class EmptySceneError(ValueError):
    pass


def crop_workspace(points: np.ndarray, lo, hi) -> np.ndarray:
    """Points inside the closed box [lo, hi], original order kept."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if np.any(lo >= hi):
        raise ValueError(f"invalid crop box lo={lo} hi={hi}")
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    if not inside.any():
        raise EmptySceneError("no points left after workspace cropping")
    return points[inside]


def _sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return (d * d).sum(axis=-1)


def fps(points: np.ndarray, k: int, start_index: int = 0) -> np.ndarray:
    """Indices of ``k`` farthest-point samples.

    Greedy max-min selection starting from ``start_index``; ties go to the lowest
    point index. Already-selected points are never picked again, so ``k == N``
    returns every index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"fps needs 1 <= k <= N, got k={k}, N={n}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    mind = _sqdist(points, points[start_index])
    taken = np.zeros(n, dtype=bool)
    taken[start_index] = True
    for i in range(1, k):
        nxt = int(np.argmax(np.where(taken, -1.0, mind)))
        chosen[i] = nxt
        taken[nxt] = True
        mind = np.minimum(mind, _sqdist(points, points[nxt]))
    return chosen


def group_neighborhoods(points: np.ndarray, centers: np.ndarray, m: int) -> np.ndarray:
    """``(k, m, 3)`` offsets of each center's m nearest points (ties by index)."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if m > points.shape[0]:
        raise ValueError(f"m={m} exceeds cloud size {points.shape[0]}")
    d = ((points[None, :, :] - centers[:, None, :]) ** 2).sum(-1)
    nn_idx = np.argsort(d, axis=1, kind="stable")[:, :m]
    return points[nn_idx] - centers[:, None, :]


@dataclass
class ScenePoints:
    """Preprocessed network input for one cloud."""

    offsets: np.ndarray  # (k, m, 3)
    centers: np.ndarray  # (k, 3)


def preprocess_cloud(
    cloud: np.ndarray,
    bounds: tuple | None = None,
    n_points: int = 512,
    n_centers: int = 16,
    n_neighbors: int = 16,
    start_index: int = 0,
) -> ScenePoints:
    pts = np.asarray(cloud, dtype=np.float64)
    if bounds is not None:
        pts = crop_workspace(pts, *bounds)
    if pts.shape[0] > n_points:
        pts = pts[fps(pts, n_points, start_index)]
    centers = pts[fps(pts, min(n_centers, pts.shape[0]), start_index)]
    return ScenePoints(group_neighborhoods(pts, centers, min(n_neighbors, pts.shape[0])), centers)


class LocalEncoder(Module):
    """Per-point residual MLP over neighbourhood offsets, max+mean pooled, averaged over centers."""

    def __init__(self, rng: np.random.Generator, width: int = 32, blocks: int = 2):
        self.inp = Linear(3, width, rng)
        self.res = [(Linear(width, width, rng), Linear(width, width, rng)) for _ in range(blocks)]
        self.out_dim = 2 * width

    def point_features(self, offsets) -> Tensor:
        h = ad.silu(self.inp(offsets))
        for a, b in self.res:
            h = h + b(ad.silu(a(h)))
        return h

    def __call__(self, offsets) -> Tensor:
        h = self.point_features(offsets)  # (..., k, m, w)
        m = h.shape[-2]
        pooled = ad.concat([ad.tmax(h, axis=h.ndim - 2), ad.tsum(h, axis=-2) * (1.0 / m)], axis=-1)
        return ad.mean(pooled, axis=pooled.ndim - 2)


class CenterEncoder(Module):
    """Per-center MLP followed by mean pooling."""

    def __init__(self, rng: np.random.Generator, width: int = 32, out_dim: int = 32):
        self.l1 = Linear(3, width, rng)
        self.l2 = Linear(width, out_dim, rng)
        self.out_dim = out_dim

    def __call__(self, centers) -> Tensor:
        h = self.l2(ad.silu(self.l1(centers)))
        return ad.mean(h, axis=h.ndim - 2)


def film_hierarchical(h, gamma_l, beta_l, gamma_c, beta_c) -> Tensor:
    """Local modulation first, then center modulation."""
    widths = {h.shape[-1], gamma_l.shape[-1], beta_l.shape[-1], gamma_c.shape[-1], beta_c.shape[-1]}
    if len(widths) != 1:
        raise ValueError(f"FiLM width mismatch: {sorted(widths)}")
    return (h * gamma_l + beta_l) * gamma_c + beta_c


class GeometryConditioner(Module):
    """Point encoders plus the two FiLM generators for a stack of hidden layers."""

    def __init__(self, widths: list[int], rng: np.random.Generator, local_width: int = 32, center_dim: int = 32):
        self.local = LocalEncoder(rng, width=local_width)
        self.center = CenterEncoder(rng, out_dim=center_dim)
        self.film_l = FiLMGenerator(self.local.out_dim, widths, rng)
        self.film_c = FiLMGenerator(center_dim, widths, rng)

    def features(self, offsets, centers) -> tuple[Tensor, Tensor]:
        return self.local(offsets), self.center(centers)

    def __call__(self, offsets, centers) -> list[tuple[Tensor, Tensor, Tensor, Tensor]]:
        f_l, f_c = self.features(offsets, centers)
        return [(gl, bl, gc, bc) for (gl, bl), (gc, bc) in zip(self.film_l(f_l), self.film_c(f_c))]
