"""Trajectory-level latent action model.

Action windows are split into fixed-length chunks, each chunk is embedded by a
small temporal convolution, a GRU runs over the chunk embeddings, and per-chunk
Gaussian heads read the hidden state. A FiLM-modulated MLP decodes one latent
code back into a chunk under an execution-time context vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import NonFiniteError, Parameter, Tensor
from .numerics.nn import FiLMGenerator, Linear, Module, film

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


def chunk_trajectory(actions: np.ndarray, c: int) -> np.ndarray:
    """Split ``(..., H, d_a)`` into ``(..., K, c, d_a)`` consecutive, non-overlapping chunks."""
    actions = np.asarray(actions)
    H = actions.shape[-2]
    if c < 1 or H % c != 0:
        raise ValueError(f"horizon {H} is not a positive multiple of chunk length {c}")
    return actions.reshape(*actions.shape[:-2], H // c, c, actions.shape[-1])


def unchunk(chunks: np.ndarray) -> np.ndarray:
    return chunks.reshape(*chunks.shape[:-3], chunks.shape[-3] * chunks.shape[-2], chunks.shape[-1])


@dataclass
class LatentCode:
    mean: Tensor
    logvar: Tensor
    sample: Tensor | None = None
    eps: np.ndarray | None = None  # the standard-normal draw behind a training sample


class ChunkEmbedding(Module):
    """Kernel-3 same-padded convolution over time, SiLU, then flatten + affine to ``d_x``."""

    def __init__(self, c: int, d_a: int, d_x: int, rng: np.random.Generator, channels: int = 16, kernel: int = 3):
        self.c, self.d_a, self.kernel = c, d_a, kernel
        bound = 1.0 / np.sqrt(kernel * d_a)
        self.conv_w = Parameter(rng.uniform(-bound, bound, size=(kernel, d_a, channels)))
        self.conv_b = Parameter(np.zeros(channels))
        self.proj = Linear(c * channels, d_x, rng)

    def conv(self, chunk) -> Tensor:
        chunk = ad.as_tensor(chunk)
        if chunk.shape[-2:] != (self.c, self.d_a):
            raise ValueError(f"chunk shape {chunk.shape[-2:]} != {(self.c, self.d_a)}")
        half = self.kernel // 2
        padded = ad.pad_axis(chunk, chunk.ndim - 2, half, self.kernel - 1 - half)
        out = None
        for k in range(self.kernel):
            tap = ad.matmul(padded[..., k:k + self.c, :], self.conv_w[k])
            out = tap if out is None else out + tap
        return out + self.conv_b

    def __call__(self, chunk) -> Tensor:
        h = ad.silu(self.conv(chunk))
        flat = h.reshape(*h.shape[:-2], h.shape[-2] * h.shape[-1])
        return self.proj(flat)


class GRUCell(Module):
    """h' = (1-u)*h + u*tanh(W_n x + U_n (r*h) + b_n) with sigmoid gates r, u."""

    def __init__(self, d_x: int, d_h: int, rng: np.random.Generator):
        self.d_h = d_h
        bx, bh = 1.0 / np.sqrt(d_x), 1.0 / np.sqrt(d_h)
        self.w_x = Parameter(rng.uniform(-bx, bx, size=(d_x, 3 * d_h)))
        self.w_h = Parameter(rng.uniform(-bh, bh, size=(d_h, 2 * d_h)))
        self.w_n = Parameter(rng.uniform(-bh, bh, size=(d_h, d_h)))
        self.b = Parameter(np.zeros(3 * d_h))

    def __call__(self, x, h) -> Tensor:
        d = self.d_h
        x, h = ad.as_tensor(x), ad.as_tensor(h)
        gx = ad.matmul(x, self.w_x) + self.b
        gh = ad.matmul(h, self.w_h)
        r = ad.sigmoid(gx[..., :d] + gh[..., :d])
        u = ad.sigmoid(gx[..., d:2 * d] + gh[..., d:])
        cand = ad.tanh(gx[..., 2 * d:] + ad.matmul(r * h, self.w_n))
        return h + u * (cand - h)


class LatentActionModel(Module):
    def __init__(
        self,
        d_a: int,
        c: int = 4,
        d_z: int = 16,
        d_h: int = 64,
        d_x: int = 32,
        d_v: int = 5,
        hidden: tuple[int, ...] = (64, 64),
        seed_rng: np.random.Generator | None = None,
    ):
        rng = seed_rng if seed_rng is not None else np.random.default_rng(0)
        self.d_a, self.c, self.d_z, self.d_h, self.d_v = d_a, c, d_z, d_h, d_v
        self.embed = ChunkEmbedding(c, d_a, d_x, rng)
        self.gru = GRUCell(d_x, d_h, rng)
        self.mu_head = Linear(d_h, d_z, rng)
        self.logvar_head = Linear(d_h, d_z, rng)
        sizes = [d_z, *hidden]
        self.dec_layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.dec_out = Linear(sizes[-1], c * d_a, rng)
        self.ctx_film = FiLMGenerator(d_v, list(hidden), rng)

    # encoder -------------------------------------------------------------

    def encoder_parameters(self) -> list[Parameter]:
        return [p for k, p in self.named_parameters() if not k.startswith(("dec_", "ctx_film"))]

    def decoder_parameters(self) -> list[Parameter]:
        return [p for k, p in self.named_parameters() if k.startswith(("dec_", "ctx_film"))]

    def encode_sequence(self, chunks) -> tuple[list[Tensor], list[LatentCode]]:
        """Run the GRU over ``(..., K, c, d_a)`` chunks; return h_1..h_K and one code per chunk."""
        chunks = ad.as_tensor(chunks)
        K = chunks.shape[-3]
        if K < 1:
            raise ValueError("need at least one chunk")
        x = self.embed(chunks)  # (..., K, d_x)
        h = Tensor(np.zeros((*chunks.shape[:-3], self.d_h)))
        hs, codes = [], []
        for k in range(K):
            h = self.gru(x[..., k, :], h)
            hs.append(h)
            mu = self.mu_head(h)
            logvar = ad.clip(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
            codes.append(LatentCode(mu, logvar))
        return hs, codes

    def encode_mean(self, actions: np.ndarray) -> np.ndarray:
        """Deterministic latent trajectory ``(..., K, d_z)`` for ``(..., H, d_a)`` action windows."""
        _, codes = self.encode_sequence(chunk_trajectory(actions, self.c))
        return np.stack([cd.mean.data for cd in codes], axis=-2)

    # decoder -------------------------------------------------------------

    def decode_chunk(self, z, ctx, modulate: bool = True) -> Tensor:
        """Map ``(..., d_z)`` codes and ``(..., d_v)`` contexts to ``(..., c, d_a)`` chunks."""
        z = ad.as_tensor(z)
        if z.shape[-1] != self.d_z:
            raise ValueError(f"latent width {z.shape[-1]} != {self.d_z}")
        mods = None
        if modulate:
            ctx = ad.as_tensor(ctx)
            if ctx.shape[-1] != self.d_v:
                raise ValueError(f"context width {ctx.shape[-1]} != {self.d_v}")
            mods = self.ctx_film(ctx)
        h = z
        for i, layer in enumerate(self.dec_layers):
            h = layer(h)
            if mods is not None:
                h = film(h, *mods[i])
            h = ad.silu(h)
        out = self.dec_out(h)
        return out.reshape(*out.shape[:-1], self.c, self.d_a)

    # objective -----------------------------------------------------------

    def loss(
        self,
        actions: np.ndarray,
        ctx: np.ndarray,
        rng: np.random.Generator,
        kl_weight: float = 1e-3,
        smooth_weight: float = 1e-2,
    ) -> tuple[Tensor, dict[str, float]]:
        """VAE objective on ``(B, H, d_a)`` windows with per-chunk contexts ``(B, K, d_v)``."""
        chunks = chunk_trajectory(actions, self.c)
        _, codes = self.encode_sequence(chunks)
        mu = ad.stack([cd.mean for cd in codes], axis=-2)
        logvar = ad.stack([cd.logvar for cd in codes], axis=-2)
        z = sample_latent(LatentCode(mu, logvar), "train", rng)
        recon = self.decode_chunk(z, ctx)
        rec = ad.mean(ad.square(recon - chunks))
        kl = kl_divergence(mu, logvar)
        sm = latent_smoothness(mu)
        total = rec + kl_weight * kl + smooth_weight * sm
        if not np.isfinite(total.data):
            raise NonFiniteError(f"non-finite VAE loss (recon={rec.data}, kl={kl.data}, smooth={sm.data})")
        return total, {"recon": float(rec.data), "kl": float(kl.data), "smooth": float(sm.data)}

    def reconstruct(self, actions: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        mu = self.encode_mean(actions)
        return unchunk(self.decode_chunk(mu, ctx).data)


def sample_latent(code: LatentCode, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Reparameterised draw in train mode, the mean in eval mode."""
    if mode == "eval":
        code.sample = code.mean
        return code.mean
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    eps = rng.standard_normal(code.mean.shape)
    code.eps = eps
    code.sample = code.mean + ad.exp(0.5 * code.logvar) * eps
    return code.sample


def kl_divergence(mu, logvar) -> Tensor:
    """Mean over codes of 0.5 * sum_d (mu^2 + sigma^2 - 1 - log sigma^2)."""
    per = 0.5 * ad.tsum(ad.square(mu) + ad.exp(logvar) - 1.0 - logvar, axis=-1)
    return ad.mean(per)


def latent_smoothness(mu) -> Tensor:
    """Mean squared distance between consecutive latent means along the chunk axis."""
    mu = ad.as_tensor(mu)
    if mu.shape[-2] < 2:
        return Tensor(0.0)
    diff = mu[..., 1:, :] - mu[..., :-1, :]
    return ad.mean(ad.tsum(ad.square(diff), axis=-1))
