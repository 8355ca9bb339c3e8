"""Parameter containers and the handful of layers the models are built from."""

from __future__ import annotations

import hashlib
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "silu": ad.silu,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "identity": lambda x: x,
}


class Module:
    """Base class: attributes that are Parameters or Modules (or lists of them) are discovered."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in own.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k, p in sorted(self.named_parameters()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _walk(val, name):
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        scale = 0.0 if zero else 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-scale, scale, size=(n_in, n_out)) if not zero else np.zeros((n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


class MLP(Module):
    """Plain MLP; activation between layers, none after the last."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, act: str = "silu"):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.act = act

    def __call__(self, x) -> Tensor:
        f = ACTIVATIONS[self.act]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = f(x)
        return x


class FiLMGenerator(Module):
    """Maps a conditioning vector to per-layer (gamma, beta).

    The output layer is zero-initialised with bias 1 on the gamma half and 0 on
    the beta half, so the modulation is exactly the identity before training.
    """

    def __init__(self, n_cond: int, widths: list[int], rng: np.random.Generator, hidden: int = 64):
        self.widths = list(widths)
        total = 2 * sum(widths)
        self.hidden = Linear(n_cond, hidden, rng)
        self.head = Linear(hidden, total, rng, zero=True)
        bias = np.zeros(total)
        off = 0
        for w in widths:
            bias[off:off + w] = 1.0
            off += 2 * w
        self.head.bias.data = bias

    def __call__(self, cond) -> list[tuple[Tensor, Tensor]]:
        out = self.head(ad.silu(self.hidden(cond)))
        params = []
        off = 0
        for w in self.widths:
            gamma = out[..., off:off + w]
            beta = out[..., off + w:off + 2 * w]
            params.append((gamma, beta))
            off += 2 * w
        return params


def film(h, gamma, beta) -> Tensor:
    """Feature-wise affine modulation ``gamma * h + beta``."""
    if gamma.shape[-1] != h.shape[-1] or beta.shape[-1] != h.shape[-1]:
        raise ValueError(f"FiLM width mismatch: h {h.shape[-1]}, gamma {gamma.shape[-1]}, beta {beta.shape[-1]}")
    return h * gamma + beta
