"""Consistency training of the Prompt DiT in the frozen autoencoder's latent space."""

from __future__ import annotations

import copy
import json
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from . import rng
from .config import RunConfig
from .data import PairedDataset, sample_patch_batch
from .errors import ConfigError, ContractError, TrainingError
from .pae import PromptAutoencoder, PromptFeatures, load_pae, to_tensor
from .pdit import ConditionalEmbedding, PromptDiT, consistency_fn
from .schedule import (
    Curriculum,
    EDMCoefficients,
    SigmaSchedule,
    TimestepSampler,
    curriculum_steps,
    sigma_grid,
    timestep_probs,
)

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class LatentStats:
    mean: torch.Tensor  # (C,) float64
    std: torch.Tensor  # (C,) float64
    sigma_data: float = 0.5

    def _view(self, t, z):
        return t.to(z.dtype).to(z.device).view(1, -1, *([1] * (z.ndim - 2)))

    def tensors(self) -> dict[str, np.ndarray]:
        return {"stats.mean": self.mean.numpy(), "stats.std": self.std.numpy()}

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "LatentStats":
        if "stats.mean" not in ck.tensors:
            raise ConfigError("checkpoint has no latent statistics")
        return cls(
            torch.from_numpy(ck.tensors["stats.mean"].astype(np.float64)),
            torch.from_numpy(ck.tensors["stats.std"].astype(np.float64)),
            float(ck.extra.get("sigma_data", 0.5)),
        )


def normalize(z: torch.Tensor, stats: LatentStats) -> torch.Tensor:
    if z.shape[1] != stats.mean.numel():
        raise ContractError(f"latent has {z.shape[1]} channels, stats have {stats.mean.numel()}")
    return (z - stats._view(stats.mean, z)) / stats._view(stats.std, z) * stats.sigma_data


def denormalize(z_n: torch.Tensor, stats: LatentStats) -> torch.Tensor:
    if z_n.shape[1] != stats.mean.numel():
        raise ContractError(f"latent has {z_n.shape[1]} channels, stats have {stats.mean.numel()}")
    return z_n / stats.sigma_data * stats._view(stats.std, z_n) + stats._view(stats.mean, z_n)


class StreamingMoments:
    """Per-channel running sums in float64 (order-independent up to rounding)."""

    def __init__(self, channels: int):
        self.n = 0
        self.s1 = torch.zeros(channels, dtype=torch.float64)
        self.s2 = torch.zeros(channels, dtype=torch.float64)

    def update(self, z: torch.Tensor):
        z = z.detach().double().transpose(0, 1).reshape(z.shape[1], -1)
        self.n += z.shape[1]
        self.s1 += z.sum(dim=1)
        self.s2 += (z * z).sum(dim=1)

    def finalize(self):
        mean = self.s1 / self.n
        var = (self.s2 / self.n - mean**2).clamp_min(0.0)
        return mean, var.sqrt()


@torch.no_grad()
def compute_latent_stats(
    pae: PromptAutoencoder,
    dataset: PairedDataset,
    n_batches: int,
    batch: int = 16,
    seed: int = 0,
    sigma_data: float = 0.5,
) -> LatentStats:
    """Channel mean/std of encoded latents over ``n_batches`` sampled batches.

    Raises:
        TrainingError: a channel's std is below 1e-8 (collapsed latent).
    """
    if n_batches < 1:
        raise ContractError("n_batches must be >= 1")
    pae.eval()
    ds = dataset.with_patch(dataset.patch, rng.derive_int(seed, "latent-stats"))
    acc = StreamingMoments(pae.latent_ch)
    for b in range(n_batches):
        clean, noisy = sample_patch_batch(ds, batch, b)
        z, _ = pae.encode(to_tensor(noisy - clean))
        acc.update(z)
    mean, std = acc.finalize()
    bad = [i for i, s in enumerate(std.tolist()) if s < STD_FLOOR]
    if bad:
        raise TrainingError(f"degenerate latent channel(s) {bad}: std < {STD_FLOOR} (identical inputs?)")
    return LatentStats(mean, std, sigma_data)


@torch.no_grad()
def ema_update(ema: nn.Module, student: nn.Module, decay: float) -> nn.Module:
    """``ema <- decay * ema + (1 - decay) * student`` for every parameter and buffer."""
    if not 0.0 <= decay < 1.0:
        raise ContractError(f"decay must be in [0, 1), got {decay}")
    for pe, ps in zip(ema.parameters(), student.parameters()):
        pe.mul_(decay).add_(ps.detach(), alpha=1.0 - decay)
    for be, bs in zip(ema.buffers(), student.buffers()):
        be.copy_(bs)
    return ema


@dataclass
class CMSettings:
    schedule: SigmaSchedule
    curriculum: Curriculum
    sampler: TimestepSampler
    edm: EDMCoefficients
    ema_decay: float
    grad_clip: float
    cond_noise_std: float

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "CMSettings":
        c = cfg["cm"]
        return cls(
            SigmaSchedule(c["sigma_min"], c["sigma_max"], c["tau"]),
            Curriculum(c["s0"], c["s1"], c["iterations"], c["floored_curriculum"]),
            TimestepSampler(c["p_mean"], c["p_std"]),
            EDMCoefficients(c["sigma_data"]),
            c["ema_decay"],
            c["grad_clip"],
            cfg["pdit"]["cond_noise_std"],
        )


@dataclass
class TrainState:
    student: PromptDiT
    ema: PromptDiT
    optimizer: torch.optim.Optimizer
    iteration: int
    seed: int
    config: RunConfig

    @classmethod
    def create(cls, cfg: RunConfig) -> "TrainState":
        torch.manual_seed(rng.derive_int(cfg["seed"], "pdit-init"))
        student = PromptDiT.from_config(cfg)
        ema = copy.deepcopy(student)
        for p in ema.parameters():
            p.requires_grad_(False)
        opt = torch.optim.RAdam(student.parameters(), lr=cfg["cm"]["lr"])
        return cls(student, ema, opt, 0, cfg["seed"], cfg)


class EncodedBatcher:
    """Encodes sampled crops with the frozen autoencoder, caching per crop origin."""

    def __init__(self, pae: PromptAutoencoder, stats: LatentStats, dataset: PairedDataset, cache_size: int = 256):
        self.pae = pae.eval()
        self.stats = stats
        self.ds = dataset
        self.cache: OrderedDict = OrderedDict()
        self.cache_size = cache_size

    @torch.no_grad()
    def _encode_one(self, key, clean, noisy):
        if key in self.cache:
            self.cache.move_to_end(key)
            return self.cache[key]
        z, prompts = self.pae.encode(to_tensor(noisy - clean))
        item = (normalize(z, self.stats)[0], [g[0] for g in prompts.global_], prompts.local[0])
        self.cache[key] = item
        if len(self.cache) > self.cache_size:
            self.cache.popitem(last=False)
        return item

    def batch(self, size: int, iteration: int):
        """Returns ``(clean, z0, prompts)`` with ``z0`` normalized."""
        clean, noisy, origins = sample_patch_batch(self.ds, size, iteration, return_origins=True)
        items = [self._encode_one(o, c, n) for o, c, n in zip(origins, clean, noisy)]
        z0 = torch.stack([it[0] for it in items])
        glob = [torch.stack([it[1][l] for it in items]) for l in range(len(items[0][1]))]
        local = torch.stack([it[2] for it in items])
        return to_tensor(clean), z0, PromptFeatures(glob, local)


def noisy_pair(z0: torch.Tensor, sigma_t: torch.Tensor, sigma_t1: torch.Tensor, eps: torch.Tensor):
    """``(z0 + sigma_t * eps, z0 + sigma_{t+1} * eps)`` with one shared ``eps``."""
    if eps.shape != z0.shape:
        raise ContractError(f"noise {tuple(eps.shape)} vs latent {tuple(z0.shape)}")
    view = (z0.shape[0],) + (1,) * (z0.ndim - 1)
    z_t = z0 + sigma_t.to(z0.dtype).view(view) * eps
    z_t1 = z0 + sigma_t1.to(z0.dtype).view(view) * eps
    return z_t, z_t1


def ct_loss(
    model: PromptDiT,
    clean: torch.Tensor,
    z0: torch.Tensor,
    prompts: PromptFeatures,
    sigma_t: torch.Tensor,
    sigma_t1: torch.Tensor,
    eps: torch.Tensor,
    settings: CMSettings,
    teacher: PromptDiT | None = None,
):
    """Weighted pseudo-Huber CT loss for one batch.

    Both noise levels share ``eps``. The teacher (default: the student itself)
    is evaluated without gradient.

    Returns:
        ``(loss, per_sample_loss, weights)``.
    """
    z_t, z_t1 = noisy_pair(z0, sigma_t, sigma_t1, eps)
    sigma_0 = settings.schedule.sigma_min
    cond = model.cond_embed(clean, prompts)
    student_out = consistency_fn(model, z_t1, sigma_t1, sigma_0, cond, settings.edm)
    teacher = model if teacher is None else teacher
    with torch.no_grad():
        t_cond = teacher.cond_embed(clean, prompts) if teacher is not model else _detached(cond)
        target = consistency_fn(teacher, z_t, sigma_t, sigma_0, t_cond, settings.edm)
    m = z0[0].numel()
    c = 0.00054 * m**0.5
    dist = (((student_out - target) ** 2).flatten(1).sum(dim=1) + c * c).sqrt() - c
    weights = (1.0 / (sigma_t1 - sigma_t)).to(z0.dtype)
    per_sample = weights * dist
    return per_sample.mean(), per_sample.detach(), weights


def _detached(cond):
    from .pdit import ConditionalEmbedding

    return ConditionalEmbedding(cond.f_cond.detach(), cond.pooled.detach())


def draw_noise_levels(N: int, settings: CMSettings, batch: int, seed: int, iteration: int):
    """Sample interval indices ``t`` and return ``(t, sigma_t, sigma_{t+1})`` (float64)."""
    grid = sigma_grid(N, settings.schedule)
    probs = timestep_probs(N, settings.schedule, settings.sampler)
    g = rng.generator(seed, "ct-timestep", iteration)
    t = g.choice(N - 1, size=batch, p=probs)
    return t + 1, torch.from_numpy(grid[t]), torch.from_numpy(grid[t + 1])


def ct_step(
    batch,
    state: TrainState,
    settings: CMSettings,
) -> tuple[float, TrainState, dict]:
    """One consistency-training update.

    Args:
        batch: ``(clean, z0, prompts)`` with ``z0`` already normalized.

    Returns:
        ``(loss, state, record)`` where ``record`` is the log line for this step.
    """
    clean, z0, prompts = batch
    k = state.iteration
    B = z0.shape[0]
    N = curriculum_steps(min(k, settings.curriculum.K), settings.curriculum)
    t, sigma_t, sigma_t1 = draw_noise_levels(N, settings, B, state.seed, k)
    eps = torch.randn(z0.shape, generator=rng.torch_generator(state.seed, "ct-eps", k), dtype=z0.dtype)
    if settings.cond_noise_std > 0:
        g = rng.torch_generator(state.seed, "ct-cond-noise", k)
        clean = clean + settings.cond_noise_std * torch.randn(clean.shape, generator=g, dtype=clean.dtype)
    torch.manual_seed(rng.derive_int(state.seed, "ct-dropout", k))
    state.student.train()
    loss, per_sample, weights = ct_loss(state.student, clean, z0, prompts, sigma_t, sigma_t1, eps, settings)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite CT loss at iteration {k}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if settings.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), settings.grad_clip)
    state.optimizer.step()
    ema_update(state.ema, state.student, settings.ema_decay)
    state.iteration = k + 1
    record = {
        "iteration": k,
        "N": N,
        "t": t.tolist(),
        "sigma_t": sigma_t.tolist(),
        "loss": loss.item(),
        "lambda": weights.tolist(),
    }
    return loss.item(), state, record


def pdit_checkpoint(state: TrainState, stats: LatentStats, pae_fingerprint: str, extra=None) -> ckpt_io.Checkpoint:
    tensors = {}
    tensors.update(ckpt_io.to_numpy_state("ema", state.ema.state_dict()))
    tensors.update(ckpt_io.to_numpy_state("student", state.student.state_dict()))
    tensors.update(stats.tensors())
    info = {"sigma_data": stats.sigma_data, "pae_fingerprint": pae_fingerprint}
    info.update(extra or {})
    return ckpt_io.Checkpoint("pdit", tensors, state.config, state.iteration, info)


def load_pdit(path_or_ckpt, use_ema: bool = True) -> tuple[PromptDiT, LatentStats, RunConfig]:
    ck = path_or_ckpt if isinstance(path_or_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(path_or_ckpt, kind="pdit")
    stats = LatentStats.from_checkpoint(ck)
    model = PromptDiT.from_config(ck.config)
    model.load_state_dict(ck.state_dict("ema" if use_ema else "student"))
    model.eval()
    return model, stats, ck.config


def train_pdit(
    dataset: PairedDataset,
    pae_ckpt,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    stats: LatentStats | None = None,
    callback: Callable[[dict], None] | None = None,
) -> ckpt_io.Checkpoint:
    """Consistency training with curriculum, EMA and periodic checkpoints.

    Writes ``train_log.jsonl`` (one record per iteration) next to the
    checkpoints when ``out_dir`` is given.
    """
    c = cfg["cm"]
    pae_ck = pae_ckpt if isinstance(pae_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(pae_ckpt, kind="pae")
    pae, pae_cfg = load_pae(pae_ck)
    if pae_cfg["pae"] != cfg["pae"]:
        raise ConfigError("the [pae] section of the config does not match the autoencoder checkpoint")
    settings = CMSettings.from_config(cfg)
    ds = dataset.with_patch(c["patch"], cfg["seed"])
    if stats is None:
        if c["stats_batches"] < 1:
            raise ConfigError("latent statistics missing and stats_batches < 1")
        stats = compute_latent_stats(pae, ds, c["stats_batches"], c["batch"], cfg["seed"], c["sigma_data"])
    batcher = EncodedBatcher(pae, stats, ds)
    state = TrainState.create(cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    losses = []
    last_good = None
    t0 = time.time()
    try:
        for k in range(c["iterations"]):
            batch = batcher.batch(c["batch"], k)
            try:
                loss, state, record = ct_step(batch, state, settings)
            except TrainingError as exc:
                raise TrainingError(str(exc), last_good) from exc
            losses.append(loss)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(record)
            if c["log_every"] and (k % c["log_every"] == 0 or k == c["iterations"] - 1):
                log.info("pdit iter=%d N=%d loss=%.5f elapsed=%.1fs", k, record["N"], loss, time.time() - t0)
            if out is not None and c["checkpoint_every"] and (k + 1) % c["checkpoint_every"] == 0:
                last_good = ckpt_io.save(pdit_checkpoint(state, stats, pae_ck.fingerprint), out / f"iter_{k + 1:07d}")
    finally:
        if log_fh is not None:
            log_fh.close()
    ck = pdit_checkpoint(state, stats, pae_ck.fingerprint)
    ck.tensors["history.loss"] = np.asarray(losses, dtype=np.float64)
    if out is not None:
        ckpt_io.save(ck, out / "final")
    return ck
