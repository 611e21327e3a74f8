"""Prompt autoencoder.

The encoder maps a noise residual to a latent code at 1/8 resolution while
producing prompt features: global ones from channel moments of the trunk
features (one block per scale) and local ones from the residual's local
correlation structure. The decoder maps a latent code back to a noisy image,
conditioned on the clean image at every scale.

Tensors are NCHW. Public entry points also accept a single HWC numpy image via
the helpers in :mod:`promptnoise.genpipe`.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from . import noisestats, rng
from .config import RunConfig
from .data import PairedDataset, sample_patch_batch
from .errors import ConfigError, ContractError, TrainingError

log = logging.getLogger(__name__)

NUM_SCALES = 4


@dataclass
class PromptFeatures:
    """``global_`` holds one ``(B, C_g, H/2**l, W/2**l)`` tensor per scale;
    ``local`` is ``(B, C_l, H, W)``."""

    global_: list[torch.Tensor]
    local: torch.Tensor

    def detach(self) -> "PromptFeatures":
        return PromptFeatures([g.detach() for g in self.global_], self.local.detach())


def resample_prompt(p: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(p.shape[-2:]) == tuple(size):
        return p
    return F.interpolate(p, size=size, mode="bilinear", align_corners=False)


def pixel_down(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Space-to-depth; identity for ``factor == 1``."""
    return x if factor == 1 else F.pixel_unshuffle(x, factor)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class GlobalPromptBlock(nn.Module):
    """Prompt features weighted by the channel mean and log-std of the input features.

    The log makes the weights respond to multiplicative changes in noise level,
    which raw standard deviations of a few hundredths barely do.
    """

    def __init__(self, in_ch: int, prompt_ch: int, size: int):
        super().__init__()
        self.prompt = nn.Parameter(torch.randn(1, prompt_ch, size, size) * 0.02)
        self.coef = nn.Conv2d(2 * in_ch, prompt_ch, 1)
        self.refine = nn.Conv2d(prompt_ch, prompt_ch, 3, padding=1)

    def coefficients(self, f_in: torch.Tensor) -> torch.Tensor:
        mu = f_in.mean(dim=(2, 3), keepdim=True)
        log_sd = 0.5 * torch.log(f_in.var(dim=(2, 3), unbiased=False, keepdim=True) + 1e-8)
        return torch.softmax(self.coef(torch.cat([mu, log_sd], dim=1)), dim=1)

    def forward(self, f_in: torch.Tensor) -> torch.Tensor:
        if f_in.shape[1] * 2 != self.coef.in_channels:
            raise ContractError(f"expected {self.coef.in_channels // 2} input channels, got {f_in.shape[1]}")
        w = self.coefficients(f_in)
        return self.refine(w * resample_prompt(self.prompt, f_in.shape[-2:]))


def correlation_features(n: torch.Tensor, rho: int) -> torch.Tensor:
    """Row/column-averaged local correlation maps, ``(B, 2*rho, H, W)``.

    Computed on the CPU kernels with no gradient (the residual is data).
    """
    arr = n.detach().cpu().double().permute(0, 2, 3, 1).numpy()
    feats = [noisestats.rowcol_average(noisestats.local_correlation_map(a, rho)) for a in arr]
    out = torch.from_numpy(np.stack(feats)).permute(0, 3, 1, 2)
    return out.to(dtype=n.dtype, device=n.device).contiguous()


class LocalPromptBlock(nn.Module):
    """Prompt features weighted per pixel by local noise correlation."""

    def __init__(self, prompt_ch: int, size: int, rho: int = 7, mid_ch: int = 32):
        super().__init__()
        self.rho = rho
        self.prompt = nn.Parameter(torch.randn(1, prompt_ch, size, size) * 0.02)
        # correlation map block: 1x1 conv, bilinear upsample, 3x3 conv
        self.comb_in = nn.Conv2d(2 * rho, mid_ch, 1)
        self.comb_out = nn.Conv2d(mid_ch, prompt_ch, 3, padding=1)
        self.refine = nn.Conv2d(prompt_ch, prompt_ch, 3, padding=1)

    def coefficients(self, feats: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        h = self.comb_in(feats)
        if tuple(h.shape[-2:]) != tuple(size):
            h = F.interpolate(h, size=size, mode="bilinear", align_corners=False)
        return torch.softmax(self.comb_out(h), dim=1)

    def forward(self, n: torch.Tensor, feats: torch.Tensor | None = None) -> torch.Tensor:
        size = tuple(n.shape[-2:])
        if feats is None:
            feats = correlation_features(n, self.rho)
        w = self.coefficients(feats, size)
        return self.refine(w * resample_prompt(self.prompt, size))


class PromptEncoder(nn.Module):
    def __init__(
        self,
        channels=(64, 128, 256, 256),
        global_ch: int = 32,
        local_ch: int = 32,
        latent_ch: int = 4,
        res_blocks: int = 1,
        rho: int = 7,
        base_size: int = 64,
        shortcut: bool = False,
    ):
        super().__init__()
        if len(channels) != NUM_SCALES:
            raise ConfigError(f"need {NUM_SCALES} trunk widths, got {channels}")
        c = list(channels)
        self.stem = nn.Conv2d(3, c[0], 3, padding=1)
        self.gpb = nn.ModuleList(GlobalPromptBlock(c[l], global_ch, max(base_size >> l, 1)) for l in range(NUM_SCALES))
        self.lpb = LocalPromptBlock(local_ch, base_size, rho)
        self.fuse = nn.ModuleList(
            nn.Conv2d(c[l] + global_ch + (local_ch if l == 0 else 0), c[l], 1) for l in range(NUM_SCALES)
        )
        self.blocks = nn.ModuleList(
            nn.Sequential(*[ResBlock(c[l]) for _ in range(res_blocks)]) for l in range(NUM_SCALES)
        )
        self.down = nn.ModuleList(nn.Conv2d(c[l], c[l + 1], 3, stride=2, padding=1) for l in range(NUM_SCALES - 1))
        self.out = nn.Conv2d(c[-1], latent_ch, 3, padding=1)
        # linear space-to-depth path; lets a wide latent carry per-pixel noise
        self.skip = nn.Conv2d(3 * 64, latent_ch, 1) if shortcut else None

    def forward(self, n: torch.Tensor, corr_feats: torch.Tensor | None = None):
        H, W = n.shape[-2:]
        if H % 8 or W % 8:
            raise ConfigError(f"spatial dims must be divisible by 8, got {H}x{W}")
        h = self.stem(n)
        f_local = self.lpb(n, corr_feats)
        f_global = []
        for l in range(NUM_SCALES):
            g = self.gpb[l](h)
            f_global.append(g)
            parts = [h, g, f_local] if l == 0 else [h, g]
            h = self.blocks[l](self.fuse[l](torch.cat(parts, dim=1)))
            if l < NUM_SCALES - 1:
                h = self.down[l](F.silu(h))
        z = self.out(F.silu(h))
        if self.skip is not None:
            z = z + self.skip(pixel_down(n, 8))
        return z, PromptFeatures(f_global, f_local)


class Decoder(nn.Module):
    """Latent + clean image -> noisy image.

    The clean image is space-to-depth'ed to every scale and concatenated. The
    head predicts the noise, which is added to the clean image; outputs are
    clamped to [0, 1] in eval mode only.
    """

    def __init__(self, channels=(64, 128, 256, 256), latent_ch: int = 4, res_blocks: int = 1, shortcut: bool = False):
        super().__init__()
        c = list(channels)
        cond = [3 * 4**l for l in range(NUM_SCALES)]
        self.inp = nn.Conv2d(latent_ch + cond[3], c[3], 3, padding=1)
        self.blocks = nn.ModuleList(
            nn.Sequential(*[ResBlock(c[l]) for _ in range(res_blocks)]) for l in range(NUM_SCALES)
        )
        self.up = nn.ModuleList(nn.Conv2d(c[l + 1], c[l], 3, padding=1) for l in range(NUM_SCALES - 1))
        self.fuse = nn.ModuleList(nn.Conv2d(c[l] + cond[l], c[l], 1) for l in range(NUM_SCALES - 1))
        self.head = nn.Conv2d(c[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.skip = nn.Conv2d(latent_ch, 3 * 64, 1) if shortcut else None
        if shortcut:
            nn.init.zeros_(self.skip.weight)
            nn.init.zeros_(self.skip.bias)

    def forward(self, z: torch.Tensor, clean: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        H, W = clean.shape[-2:]
        if (H, W) != (z.shape[-2] * 8, z.shape[-1] * 8):
            raise ContractError(f"clean {H}x{W} does not match latent {tuple(z.shape[-2:])} x 8")
        h = self.inp(torch.cat([z, pixel_down(clean, 8)], dim=1))
        for l in range(NUM_SCALES - 1, -1, -1):
            h = self.blocks[l](h)
            if l > 0:
                h = self.up[l - 1](F.interpolate(F.silu(h), scale_factor=2, mode="nearest"))
                h = self.fuse[l - 1](torch.cat([h, pixel_down(clean, 2 ** (l - 1))], dim=1))
        out = clean + self.head(F.silu(h))
        if self.skip is not None:
            out = out + F.pixel_shuffle(self.skip(z), 8)
        if clamp is None:
            clamp = not self.training
        return out.clamp(0.0, 1.0) if clamp else out


class PromptAutoencoder(nn.Module):
    def __init__(
        self,
        channels=(64, 128, 256, 256),
        global_ch: int = 32,
        local_ch: int = 32,
        latent_ch: int = 4,
        res_blocks: int = 1,
        rho: int = 7,
        base_size: int = 64,
        shortcut: bool = False,
    ):
        super().__init__()
        self.latent_ch = latent_ch
        self.rho = rho
        self.encoder = PromptEncoder(channels, global_ch, local_ch, latent_ch, res_blocks, rho, base_size, shortcut)
        self.decoder = Decoder(channels, latent_ch, res_blocks, shortcut)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PromptAutoencoder":
        p = cfg["pae"]
        return cls(
            tuple(p["channels"]), p["global_channels"], p["local_channels"],
            p["latent_channels"], p["res_blocks"], p["rho"], p["base_size"], p["shortcut"],
        )

    def encode(self, n: torch.Tensor, corr_feats: torch.Tensor | None = None):
        return self.encoder(n, corr_feats)

    def decode(self, z: torch.Tensor, clean: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        return self.decoder(z, clean, clamp)

    def forward(self, clean: torch.Tensor, noisy: torch.Tensor, corr_feats=None):
        z, prompts = self.encode(noisy - clean, corr_feats)
        return self.decode(z, clean), z, prompts


def pae_loss(recon: torch.Tensor, noisy: torch.Tensor, z: torch.Tensor, lambda_z: float) -> torch.Tensor:
    """Mean absolute reconstruction error plus ``lambda_z * mean(z**2)``."""
    if recon.shape != noisy.shape:
        raise ContractError(f"shape mismatch {tuple(recon.shape)} vs {tuple(noisy.shape)}")
    return (recon - noisy).abs().mean() + lambda_z * (z**2).mean()


def cosine_lr(k: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at ``k=0`` to ``lr_min`` at ``k=total-1``."""
    if total <= 1:
        return lr_min
    frac = min(max(k / (total - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def to_tensor(batch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(B, H, W, 3)`` or ``(H, W, 3)`` numpy -> NCHW tensor."""
    t = torch.from_numpy(np.ascontiguousarray(batch))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).to(dtype).contiguous()


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> ``(B, H, W, 3)`` float64 numpy."""
    return t.detach().cpu().double().permute(0, 2, 3, 1).numpy()


def pae_checkpoint(model: PromptAutoencoder, cfg: RunConfig, iteration: int, extra=None) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        kind="pae",
        tensors=ckpt_io.to_numpy_state("model", model.state_dict()),
        config=cfg,
        iteration=iteration,
        extra=extra or {},
    )


def load_pae(path_or_ckpt) -> tuple[PromptAutoencoder, RunConfig]:
    ck = path_or_ckpt if isinstance(path_or_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(path_or_ckpt, kind="pae")
    model = PromptAutoencoder.from_config(ck.config)
    model.load_state_dict(ck.state_dict("model"))
    model.eval()
    return model, ck.config


def train_pae(
    dataset: PairedDataset,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> ckpt_io.Checkpoint:
    """Adam + cosine-annealed learning rate on :func:`pae_loss`.

    Returns the final checkpoint (also written to ``out_dir/final`` when given);
    ``extra["loss"]`` holds the per-iteration loss trace.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    p = cfg["pae"]
    seed = cfg["seed"]
    torch.manual_seed(rng.derive_int(seed, "pae-init"))
    model = PromptAutoencoder.from_config(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=p["lr"])
    ds = dataset.with_patch(p["patch"], seed)
    iters = p["iterations"]
    history: list[float] = []
    last_good = None
    t0 = time.time()
    for k in range(iters):
        lr = cosine_lr(k, iters, p["lr"], p["lr_min"])
        for group in opt.param_groups:
            group["lr"] = lr
        clean, noisy = sample_patch_batch(ds, p["batch"], k)
        clean_t, noisy_t = to_tensor(clean), to_tensor(noisy)
        recon, z, _ = model(clean_t, noisy_t)
        loss = pae_loss(recon, noisy_t, z, p["lambda_z"])
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite PAE loss at iteration {k}", last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if callback is not None:
            callback(k, loss.item())
        if p["log_every"] and (k % p["log_every"] == 0 or k == iters - 1):
            log.info("pae iter=%d loss=%.6f lr=%.3g elapsed=%.1fs", k, history[-1], lr, time.time() - t0)
        if out_dir is not None and p["checkpoint_every"] and (k + 1) % p["checkpoint_every"] == 0:
            last_good = ckpt_io.save(pae_checkpoint(model, cfg, k + 1), Path(out_dir) / f"iter_{k + 1:07d}")
    model.eval()
    ck = pae_checkpoint(model, cfg, iters, {"final_lr": cosine_lr(iters - 1, iters, p["lr"], p["lr_min"])})
    ck.tensors["history.loss"] = np.asarray(history, dtype=np.float64)
    if out_dir is not None:
        ckpt_io.save(ck, Path(out_dir) / "final")
    return ck
