"""Per-dimension affine scaling of states/actions into [-1, 1]."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class MinMaxNormalizer:
    lo: np.ndarray
    hi: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape:
            raise ValueError("lo/hi shape mismatch")
        if np.any(self.hi < self.lo):
            raise ValueError("hi < lo in normalizer stats")
        self.degenerate = self.hi == self.lo
        if np.any(self.degenerate):
            log.warning("degenerate normalizer dimensions %s map to 0", np.flatnonzero(self.degenerate).tolist())

    @classmethod
    def fit(cls, data: np.ndarray) -> "MinMaxNormalizer":
        """Stats over all rows of ``data`` (..., d). No clamping here."""
        flat = np.asarray(data, dtype=np.float64).reshape(-1, np.shape(data)[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))

    def _span(self) -> np.ndarray:
        return np.where(self.degenerate, 1.0, self.hi - self.lo)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        y = 2.0 * (np.asarray(x) - self.lo) / self._span() - 1.0
        return np.where(self.degenerate, 0.0, y)

    def denormalize(self, y: np.ndarray, clamp: bool = False) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if clamp:
            y = np.clip(y, -1.0, 1.0)
        x = (y + 1.0) * 0.5 * self._span() + self.lo
        return np.where(self.degenerate, self.lo, x)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"lo": self.lo, "hi": self.hi}

    @classmethod
    def from_state(cls, state: dict) -> "MinMaxNormalizer":
        return cls(state["lo"], state["hi"])


def normalize_actions(traj: np.ndarray, stats: MinMaxNormalizer) -> np.ndarray:
    return stats.normalize(traj)


def denormalize_actions(traj: np.ndarray, stats: MinMaxNormalizer, clamp: bool = False) -> np.ndarray:
    return stats.denormalize(traj, clamp=clamp)
