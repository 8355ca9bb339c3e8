"""Training windows, the latent-flow and raw-flow policies, and their training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .flow import Conditioning, VelocityField, cfm_loss, generate_one_step, reflow_pairs
from .geometry import GeometryConditioner, ScenePoints, preprocess_cloud
from .latent_action import LatentActionModel
from .numerics import EMA, AdamW, MinMaxNormalizer, Tape, clip_grad_norm
from .numerics.autodiff import NonFiniteError, no_grad
from .simenv import CROP_BOUNDS, Demonstration

log = logging.getLogger(__name__)

LATENT = "latent-flow"
RAW = "raw-flow"


class FrozenWeightsError(RuntimeError):
    pass


@dataclass
class WindowDataset:
    """Sliding action windows with conditioning, one per demo time step."""

    actions: np.ndarray  # (N, H, d_a), normalized
    obs: np.ndarray  # (N, history * d_obs), normalized
    ctx: np.ndarray  # (N, K, d_v)
    demo_idx: np.ndarray  # (N,)
    offsets: np.ndarray  # (D, k, m, 3)
    centers: np.ndarray  # (D, k, 3)

    def __len__(self) -> int:
        return self.actions.shape[0]

    def cond(self, idx) -> Conditioning:
        """Conditioning with each scene encoded once per batch."""
        scenes, inverse = np.unique(self.demo_idx[idx], return_inverse=True)
        return Conditioning(self.obs[idx], self.offsets[scenes], self.centers[scenes], inverse)

    def subset(self, demo_ids) -> "WindowDataset":
        keep = np.isin(self.demo_idx, list(demo_ids))
        return WindowDataset(self.actions[keep], self.obs[keep], self.ctx[keep], self.demo_idx[keep],
                             self.offsets, self.centers)


def scene_points(cloud: np.ndarray, cfg: dict) -> ScenePoints:
    return preprocess_cloud(cloud, CROP_BOUNDS, cfg["n_points"], cfg["n_centers"], cfg["n_neighbors"])


def stack_history(obs_seq: np.ndarray, t: int, history: int) -> np.ndarray:
    """Observations t-history+1..t (clamped at 0), concatenated oldest first."""
    rows = [obs_seq[max(0, t - h)] for h in range(history - 1, -1, -1)]
    return np.concatenate(rows)


def build_windows(demos: list[Demonstration], cfg: dict, act_norm: MinMaxNormalizer,
                  obs_norm: MinMaxNormalizer) -> WindowDataset:
    H, c, hist = cfg["horizon"], cfg["chunk"], cfg["obs_history"]
    K = H // c
    acts, obs, ctx, idx, offs, cents = [], [], [], [], [], []
    for di, demo in enumerate(demos):
        A = act_norm.normalize(demo.actions)
        O = obs_norm.normalize(demo.observations)
        L = demo.length
        # pad past the end with the final command
        padded = np.vstack([A, np.repeat(A[-1:], H, axis=0)])
        for t in range(L):
            acts.append(padded[t:t + H])
            obs.append(stack_history(O, t, hist))
            ctx.append(demo.contexts[[min(t + k * c, L - 1) for k in range(K)]])
            idx.append(di)
        sp = scene_points(demo.cloud, cfg)
        offs.append(sp.offsets)
        cents.append(sp.centers)
    return WindowDataset(np.array(acts), np.array(obs), np.array(ctx), np.array(idx), np.array(offs), np.array(cents))


def fit_normalizers(demos: list[Demonstration]) -> tuple[MinMaxNormalizer, MinMaxNormalizer]:
    act = MinMaxNormalizer.fit(np.vstack([d.actions for d in demos]))
    obs = MinMaxNormalizer.fit(np.vstack([d.observations for d in demos]))
    return act, obs


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch):
        yield order[s:s + batch]


# ------------------------------------------------------------------ stage 1


def train_latent(data: WindowDataset, cfg: dict, rng_init: np.random.Generator, rng_data: np.random.Generator,
                 rng_sample: np.random.Generator, val: WindowDataset | None = None,
                 on_epoch: Callable[[dict], None] | None = None, keep: dict | None = None) -> LatentActionModel:
    """Stage 1. ``keep`` (if given) receives the optimizer and EMA objects for checkpointing."""
    d_a = data.actions.shape[-1]
    model = LatentActionModel(d_a, cfg["chunk"], cfg["d_z"], cfg["d_h"], cfg["d_x"], data.ctx.shape[-1],
                              tuple(cfg["dec_hidden"]), seed_rng=rng_init)
    params = model.parameters()
    opt = AdamW(params, lr=cfg["lr"], weight_decay=cfg["weight_decay"])
    ema = EMA(params, cfg["ema_decay"])
    if keep is not None:
        keep.update(opt=opt, ema=ema, model=model)
    epochs = cfg["latent_epochs"]
    warm = max(1, int(round(cfg["kl_warmup"] * epochs)))
    for ep in range(epochs):
        klw = cfg["kl_weight"] * min(1.0, (ep + 1) / warm)
        sums = {"recon": 0.0, "kl": 0.0, "smooth": 0.0, "total": 0.0}
        nb = 0
        for idx in _batches(len(data), cfg["batch_size"], rng_data):
            with Tape() as tape:
                loss, parts = model.loss(data.actions[idx], data.ctx[idx], rng_sample, klw, cfg["smooth_weight"])
            grads = tape.backward(loss, params)
            clip_grad_norm(grads, cfg["grad_clip"])
            opt.step(grads)
            ema.update()
            for k, v in parts.items():
                sums[k] += v
            sums["total"] += float(loss.data)
            nb += 1
        row = {"epoch": ep + 1, "kl_weight": klw, **{k: v / nb for k, v in sums.items()}}
        if on_epoch is not None:
            ema.swap()
            row["train_recon_eval"] = recon_mse(model, data)
            if val is not None and len(val):
                row["val_recon"] = recon_mse(model, val)
            ema.swap()
            on_epoch(row)
    ema.copy_to()
    return model


def recon_mse(model: LatentActionModel, data: WindowDataset, batch: int = 1024) -> float:
    err, n = 0.0, 0
    for s in range(0, len(data), batch):
        a = data.actions[s:s + batch]
        r = model.reconstruct(a, data.ctx[s:s + batch])
        err += float(((r - a) ** 2).sum())
        n += a.size
    return err / max(n, 1)


# ------------------------------------------------------------------ stage 2


class FlowPolicy:
    """One-step flow policy over latent trajectories (``latent-flow``) or raw action windows (``raw-flow``)."""

    def __init__(self, kind: str, field: VelocityField, act_norm: MinMaxNormalizer, obs_norm: MinMaxNormalizer,
                 cfg: dict, vae: LatentActionModel | None = None, latent_norm: MinMaxNormalizer | None = None):
        if kind not in (LATENT, RAW):
            raise ValueError(f"unknown policy kind {kind!r}")
        if kind == LATENT and (vae is None or latent_norm is None):
            raise ValueError("latent-flow policy needs the frozen latent model and its normalizer")
        self.kind, self.field, self.vae = kind, field, vae
        self.act_norm, self.obs_norm, self.latent_norm = act_norm, obs_norm, latent_norm
        self.cfg = cfg
        self.n_decodes = 0

    @property
    def K(self) -> int:
        return self.cfg["horizon"] // self.cfg["chunk"]

    def targets(self, data: WindowDataset) -> np.ndarray:
        """Flattened flow targets for every window."""
        if self.kind == RAW:
            return data.actions.reshape(len(data), -1)
        z = encode_latents(self.vae, data)
        return self.latent_norm.normalize(z).reshape(len(data), -1)

    def generate(self, cond: Conditioning, rng: np.random.Generator | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
        return generate_one_step(self.field, cond, rng, noise=noise, t_gen=self.cfg["gen_time"])

    def act(self, obs_hist: np.ndarray, scene: ScenePoints, ctx: np.ndarray, rng: np.random.Generator,
            noise: np.ndarray | None = None) -> np.ndarray:
        """First ``chunk`` env-scale actions of a freshly generated trajectory."""
        obs = self.obs_norm.normalize(obs_hist.reshape(-1, self.obs_norm.lo.size)).reshape(1, -1)
        cond = Conditioning(obs, scene.offsets[None], scene.centers[None])
        out = self.generate(cond, rng, noise)
        c = self.cfg["chunk"]
        if self.kind == RAW:
            chunk = out.reshape(-1, self.act_norm.lo.size)[:c]
        else:
            z = self.latent_norm.denormalize(out.reshape(self.K, -1))
            with no_grad():
                chunk = self.vae.decode_chunk(z[0:1], ctx[None]).data[0]
            self.n_decodes += 1
        return self.act_norm.denormalize(chunk, clamp=True)


def encode_latents(vae: LatentActionModel, data: WindowDataset, batch: int = 2048) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(data), batch):
            out.append(vae.encode_mean(data.actions[s:s + batch]))
    return np.concatenate(out)


def make_policy(kind: str, data: WindowDataset, cfg: dict, rng_init: np.random.Generator,
                act_norm: MinMaxNormalizer, obs_norm: MinMaxNormalizer,
                vae: LatentActionModel | None = None) -> FlowPolicy:
    widths = list(cfg["flow_hidden"])
    geometry = GeometryConditioner(widths, rng_init, local_width=cfg["d_fl"] // 2, center_dim=cfg["d_fc"])
    dim = cfg["horizon"] * data.actions.shape[-1] if kind == RAW else (cfg["horizon"] // cfg["chunk"]) * cfg["d_z"]
    field = VelocityField(dim, data.obs.shape[-1], rng_init, hidden=tuple(widths), time_dim=cfg["time_dim"],
                          geometry=geometry)
    latent_norm = None
    if kind == LATENT:
        z = encode_latents(vae, data)
        latent_norm = MinMaxNormalizer.fit(z)
    return FlowPolicy(kind, field, act_norm, obs_norm, cfg, vae, latent_norm)


def train_flow(policy: FlowPolicy, data: WindowDataset, cfg: dict, rng_data: np.random.Generator,
               rng_sample: np.random.Generator, frozen_hash: str | None = None,
               on_epoch: Callable[[dict], None] | None = None, keep: dict | None = None) -> FlowPolicy:
    """Stage-2 training; the latent model is never touched and its hash is re-checked every epoch."""
    field = policy.field
    params = field.parameters()
    opt = AdamW(params, lr=cfg["lr"], weight_decay=cfg["weight_decay"])
    ema = EMA(params, cfg["ema_decay"])
    if keep is not None:
        keep.update(opt=opt, ema=ema)
    targets = policy.targets(data)

    def check_frozen():
        if policy.vae is not None and frozen_hash is not None and policy.vae.param_hash() != frozen_hash:
            raise FrozenWeightsError("latent encoder/decoder weights changed during flow training")

    def run(epochs: int, noise: np.ndarray | None, phase: str, start: int):
        for ep in range(epochs):
            sums, nb = {}, 0
            for idx in _batches(len(data), cfg["batch_size"], rng_data):
                with Tape() as tape:
                    loss, parts = cfm_loss(field, targets[idx], data.cond(idx), rng_sample,
                                           cfg["consistency_weight"], cfg["consistency_delta"],
                                           None if noise is None else noise[idx])
                grads = tape.backward(loss, params)
                clip_grad_norm(grads, cfg["grad_clip"])
                opt.step(grads)
                ema.update()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                nb += 1
            check_frozen()
            if on_epoch is not None:
                on_epoch({"epoch": start + ep + 1, "phase": phase, **{k: v / nb for k, v in sums.items()}})

    check_frozen()
    run(cfg["epochs"], None, "fm", 0)
    if cfg["reflow_epochs"] > 0:
        ema.swap()
        noise, ends = reflow_pairs(field, data.cond(np.arange(len(data))), rng_sample, len(data), cfg["reflow_steps"])
        ema.swap()
        targets = ends
        run(cfg["reflow_epochs"], noise, "reflow", cfg["epochs"])
    ema.copy_to()
    return policy


__all__ = [
    "LATENT", "RAW", "FlowPolicy", "FrozenWeightsError", "NonFiniteError", "WindowDataset", "build_windows",
    "encode_latents", "fit_normalizers", "make_policy", "recon_mse", "scene_points", "stack_history",
    "train_flow", "train_latent",
]
