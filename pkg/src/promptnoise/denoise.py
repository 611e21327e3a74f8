"""DnCNN-style residual denoiser for downstream evaluation of synthetic noise."""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from . import rng
from .config import RunConfig
from .data import PairedDataset, dihedral, sample_patch_batch
from .errors import ConfigError, ContractError, TrainingError
from .noisestats import psnr, ssim
from .pae import cosine_lr, to_numpy, to_tensor

log = logging.getLogger(__name__)

REPORT_FIELDS = ("image_id", "psnr_db", "ssim")


class DnCNN(nn.Module):
    """conv-ReLU, (conv-BN-ReLU) x (depth - 2), conv; predicts the noise.

    The last conv is zero-initialized so an untrained model is the identity.
    """

    def __init__(self, depth: int = 8, width: int = 32):
        super().__init__()
        if depth < 3 or width < 1:
            raise ConfigError(f"need depth >= 3 and width >= 1, got {depth}, {width}")
        layers: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.tail = nn.Conv2d(width, 3, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "DnCNN":
        return cls(cfg["denoise"]["depth"], cfg["denoise"]["width"])

    def forward(self, noisy: torch.Tensor) -> torch.Tensor:
        return noisy - self.tail(self.body(noisy))


def _dihedral_draws(n: int, seed: int, iteration: int) -> np.ndarray:
    return rng.generator(seed, "dn-dihedral", iteration).integers(8, size=n)


def source_schedule(mix_ratio: float, iterations: int, seed: int) -> np.ndarray:
    """Per-batch source flags (True = synthetic), Bernoulli(mix_ratio) per iteration."""
    if not 0.0 <= mix_ratio <= 1.0:
        raise ConfigError(f"mix_ratio must be in [0, 1], got {mix_ratio}")
    u = np.array([rng.generator(seed, "dn-source", k).random() for k in range(iterations)])
    return u < mix_ratio


def train_denoiser(
    real: PairedDataset | None,
    synth: PairedDataset | None,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> ckpt_io.Checkpoint:
    """L1 training on random crops with dihedral augmentation.

    Each batch comes entirely from the synthetic set with probability
    ``mix_ratio`` and from the real set otherwise.

    Raises:
        ConfigError: both sources empty, or ``mix_ratio`` asks for a source
            that was not given.
    """
    d = cfg["denoise"]
    mix = d["mix_ratio"]
    has_real = real is not None and len(real) > 0
    has_synth = synth is not None and len(synth) > 0
    if not has_real and not has_synth:
        raise ConfigError("no training pairs: both real and synthetic sources are empty")
    if mix > 0 and not has_synth:
        raise ConfigError(f"mix_ratio={mix} but no synthetic pairs given")
    if mix < 1 and not has_real:
        raise ConfigError(f"mix_ratio={mix} but no real pairs given")
    seed = cfg["seed"]
    sources = {
        False: real.with_patch(d["patch"], rng.derive_int(seed, "dn-real")) if has_real else None,
        True: synth.with_patch(d["patch"], rng.derive_int(seed, "dn-synth")) if has_synth else None,
    }
    schedule = source_schedule(mix, d["iterations"], seed)
    torch.manual_seed(rng.derive_int(seed, "dn-init"))
    model = DnCNN.from_config(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=d["lr"])
    model.train()
    losses = []
    t0 = time.time()
    for k in range(d["iterations"]):
        lr = cosine_lr(k, d["iterations"], d["lr"], d["lr_min"])
        for g in opt.param_groups:
            g["lr"] = lr
        clean, noisy = sample_patch_batch(sources[bool(schedule[k])], d["batch"], k)
        ks = _dihedral_draws(len(clean), seed, k)
        clean = np.stack([dihedral(c, j) for c, j in zip(clean, ks)])
        noisy = np.stack([dihedral(n, j) for n, j in zip(noisy, ks)])
        out = model(to_tensor(noisy))
        loss = (out - to_tensor(clean)).abs().mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite denoiser loss at iteration {k}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if callback is not None:
            callback(k, loss.item())
        if d["log_every"] and (k % d["log_every"] == 0 or k == d["iterations"] - 1):
            log.info("denoise iter=%d loss=%.5f lr=%.2e elapsed=%.1fs", k, loss.item(), lr, time.time() - t0)
    ck = ckpt_io.Checkpoint(
        "denoiser",
        {**ckpt_io.to_numpy_state("model", model.state_dict()), "history.loss": np.asarray(losses)},
        cfg,
        d["iterations"],
        {"synthetic_fraction": float(schedule.mean()) if len(schedule) else 0.0},
    )
    if out_dir is not None:
        ckpt_io.save(ck, Path(out_dir) / "final")
    return ck


def load_denoiser(path_or_ckpt) -> DnCNN:
    ck = path_or_ckpt if isinstance(path_or_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(path_or_ckpt, kind="denoiser")
    model = DnCNN.from_config(ck.config)
    model.load_state_dict(ck.state_dict("model"))
    return model.eval()


@torch.no_grad()
def denoise_image(model: nn.Module, noisy: np.ndarray) -> np.ndarray:
    model.eval()
    return np.clip(to_numpy(model(to_tensor(noisy)))[0], 0.0, 1.0)


def eval_denoiser(model: nn.Module | None, test: PairedDataset, report: str | Path | None = None) -> dict:
    """Per-image PSNR/SSIM of ``model(noisy)`` against clean; ``None`` is the identity.

    Returns:
        ``{"rows": [...], "psnr_db": mean, "ssim": mean}``; the CSV (if
        requested) has one row per pair followed by a ``mean`` row.
    """
    if len(test) == 0:
        raise ContractError("empty test set")
    rows = []
    for i, name in enumerate(test.names()):
        clean, noisy = test.pair(i)
        out = noisy if model is None else denoise_image(model, noisy)
        rows.append({"image_id": name, "psnr_db": psnr(out, clean), "ssim": ssim(out, clean)})
    result = {
        "rows": rows,
        "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    }
    if report is not None:
        report = Path(report)
        report.parent.mkdir(parents=True, exist_ok=True)
        with open(report, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({"image_id": r["image_id"], "psnr_db": repr(r["psnr_db"]), "ssim": repr(r["ssim"])})
            w.writerow({"image_id": "mean", "psnr_db": repr(result["psnr_db"]), "ssim": repr(result["ssim"])})
    return result
