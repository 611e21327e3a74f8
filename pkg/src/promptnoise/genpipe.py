"""One-step noise generation (paired and unpaired) and synthetic dataset emission."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import rng
from .cmtrain import LatentStats, denormalize, load_pdit
from .data import PairedDataset, load_image, save_image
from .errors import ConfigError, ContractError
from .pae import PromptAutoencoder, load_pae, to_numpy, to_tensor
from .pdit import PromptDiT, consistency_fn
from .schedule import EDMCoefficients, SigmaSchedule

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"


@dataclass
class NoiseBank:
    """Residual patches (``(H, W, 3)`` float64) with source identifiers."""

    residuals: list[np.ndarray]
    ids: list[str]

    def __post_init__(self):
        if len(self.residuals) != len(self.ids):
            raise ContractError("one identifier per residual required")
        shapes = {r.shape for r in self.residuals}
        if len(shapes) > 1:
            raise ContractError(f"bank residuals differ in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.residuals)

    @classmethod
    def from_dataset(cls, ds: PairedDataset, crop: int | None = None) -> "NoiseBank":
        """Residuals of every pair (center-cropped to ``crop`` if given)."""
        res, ids = [], []
        for i, name in enumerate(ds.names()):
            clean, noisy = ds.pair(i)
            r = noisy - clean
            if crop is not None:
                r = fit_residual(r, (crop, crop))
            res.append(r)
            ids.append(name)
        return cls(res, ids)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        np.savez(path, residuals=np.stack(self.residuals), ids=np.asarray(self.ids))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "NoiseBank":
        try:
            with np.load(path) as f:
                return cls(list(f["residuals"].astype(np.float64)), [str(s) for s in f["ids"]])
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read noise bank {path}: {exc}") from exc

    def draw(self, seed: int, *index: int) -> tuple[str, np.ndarray]:
        if len(self) == 0:
            raise ContractError("noise bank is empty")
        j = int(rng.generator(seed, "bank-draw", *index).integers(len(self)))
        return self.ids[j], self.residuals[j]


def fit_residual(r: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Center-crop, or reflect-tile then center-crop, ``r`` to ``shape``."""
    H, W = shape
    h, w = r.shape[:2]
    if h < H or w < W:
        ry, rx = -(-H // h), -(-W // w)
        tiles = [[r[::-1] if i % 2 else r for i in range(ry)]]
        col = np.concatenate(tiles[0], axis=0)
        r = np.concatenate([col[:, ::-1] if j % 2 else col for j in range(rx)], axis=1)
        h, w = r.shape[:2]
    y, x = (h - H) // 2, (w - W) // 2
    return r[y : y + H, x : x + W]


@dataclass
class NoiseGenerator:
    """Frozen autoencoder + EMA Prompt DiT ready for one-step sampling."""

    pae: PromptAutoencoder
    pdit: PromptDiT
    stats: LatentStats
    schedule: SigmaSchedule
    edm: EDMCoefficients
    last_saturation: float = field(default=0.0, init=False)

    @classmethod
    def from_checkpoints(cls, pdit_ckpt, pae_ckpt, check_fingerprint: bool = True) -> "NoiseGenerator":
        pdit_ck = pdit_ckpt if isinstance(pdit_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(pdit_ckpt, kind="pdit")
        pae_ck = pae_ckpt if isinstance(pae_ckpt, ckpt_io.Checkpoint) else ckpt_io.load(pae_ckpt, kind="pae")
        want = pdit_ck.extra.get("pae_fingerprint")
        if check_fingerprint and want is not None and want != pae_ck.fingerprint:
            raise ConfigError("Prompt DiT checkpoint was trained against a different autoencoder")
        pae, _ = load_pae(pae_ck)
        pdit, stats, cfg = load_pdit(pdit_ck)
        c = cfg["cm"]
        return cls(pae, pdit, stats, SigmaSchedule(c["sigma_min"], c["sigma_max"], c["tau"]), EDMCoefficients(c["sigma_data"]))

    @torch.no_grad()
    def sample_latent(self, clean_t: torch.Tensor, prompts, z_T: torch.Tensor) -> torch.Tensor:
        cond = self.pdit.cond_embed(clean_t, prompts)
        z0 = consistency_fn(self.pdit, z_T, self.schedule.sigma_max, self.schedule.sigma_min, cond, self.edm)
        return denormalize(z0, self.stats)

    def draw_zT(self, shape: tuple[int, int], seed: int, *index: int) -> torch.Tensor:
        H, W = shape
        g = rng.torch_generator(seed, "z_T", *index)
        eps = torch.randn((1, self.pae.latent_ch, H // 8, W // 8), generator=g)
        return self.schedule.sigma_max * eps

    @torch.no_grad()
    def from_residual(self, clean: np.ndarray, prompt_residual: np.ndarray, seed: int, *index: int) -> np.ndarray:
        """Synthetic noisy image for ``clean`` with prompts taken from ``prompt_residual``."""
        if clean.ndim != 3 or clean.shape[2] != 3:
            raise ContractError(f"expected an (H, W, 3) image, got {clean.shape}")
        if clean.shape != prompt_residual.shape:
            raise ContractError(f"clean {clean.shape} vs prompt residual {prompt_residual.shape}")
        H, W = clean.shape[:2]
        if H % 8 or W % 8:
            raise ContractError(f"image dims {H}x{W} must be divisible by 8")
        self.pae.eval()
        self.pdit.eval()
        clean_t = to_tensor(clean)
        _, prompts = self.pae.encode(to_tensor(prompt_residual))
        z0 = self.sample_latent(clean_t, prompts, self.draw_zT((H, W), seed, *index))
        raw = to_numpy(self.pae.decode(z0, clean_t, clamp=False))[0]
        self.last_saturation = float(np.mean((raw < 0.0) | (raw > 1.0)))
        return np.clip(raw, 0.0, 1.0)


def generate_paired(
    clean: np.ndarray, noisy_ref: np.ndarray, generator: NoiseGenerator, seed: int, index: Sequence[int] = (0,)
) -> np.ndarray:
    """Noisy image whose prompts come from the aligned pair's own residual."""
    if clean.shape != noisy_ref.shape:
        raise ContractError(f"clean {clean.shape} vs noisy reference {noisy_ref.shape}")
    return generator.from_residual(clean, noisy_ref - clean, seed, *index)


def generate_unpaired(
    clean: np.ndarray, bank: NoiseBank, generator: NoiseGenerator, seed: int, index: Sequence[int] = (0,)
) -> tuple[np.ndarray, str]:
    """Noisy image whose prompts come from a residual drawn from ``bank``.

    Returns:
        ``(image, source_id)``.
    """
    source, r = bank.draw(seed, *index)
    return generator.from_residual(clean, fit_residual(r, clean.shape[:2]), seed, *index), source


def synthesize_dataset(
    clean_dir: str | Path,
    out_dir: str | Path,
    generator: NoiseGenerator,
    seed: int,
    multiplier: int = 1,
    noisy_dir: str | Path | None = None,
    bank: NoiseBank | None = None,
    pattern: str = "*.png",
    float_sidecar: bool = False,
) -> list[dict]:
    """Write ``multiplier`` synthetic images per clean image plus a manifest.

    Exactly one of ``noisy_dir`` (paired mode) or ``bank`` (unpaired) is used.
    Output layout mirrors a paired dataset: ``out/clean`` and ``out/noisy``,
    so the result can be fed back to training directly.
    """
    if multiplier < 1:
        raise ConfigError("multiplier must be >= 1")
    if (noisy_dir is None) == (bank is None):
        raise ConfigError("give either a noisy directory (paired) or a noise bank (unpaired)")
    clean_paths = sorted(Path(clean_dir).glob(pattern))
    if not clean_paths:
        raise ConfigError(f"no clean images in {clean_dir}")
    out = Path(out_dir)
    try:
        (out / "clean").mkdir(parents=True, exist_ok=True)
        (out / "noisy").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    rows = []
    for i, cpath in enumerate(clean_paths):
        clean = load_image(cpath)
        if bank is None:
            npath = Path(noisy_dir) / cpath.name
            if not npath.exists():
                raise ContractError(f"no noisy partner for {cpath.name}")
            residual, source = load_image(npath) - clean, npath.name
        for r in range(multiplier):
            item_seed = rng.derive_int(seed, "synth-item", i, r)
            if bank is None:
                img = generator.from_residual(clean, residual, item_seed)
            else:
                img, source = generate_unpaired(clean, bank, generator, item_seed)
            name = cpath.stem + (f"_{r}" if multiplier > 1 else "") + ".png"
            save_image(clean, out / "clean" / name)
            save_image(img, out / "noisy" / name, float_sidecar)
            rows.append({
                "clean": str(cpath),
                "synthetic": str(out / "noisy" / name),
                "seed": item_seed,
                "prompt_source": source,
                "shape": list(img.shape),
                "saturation": generator.last_saturation,
            })
    rows.sort(key=lambda d: d["synthetic"])
    with open(out / MANIFEST, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return rows


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
