"""Paired image datasets, patch sampling and synthetic toy data.

Images live on disk as 8-bit PNGs and are handled internally as float64 arrays
in ``[0, 1]`` with shape ``(H, W, 3)``.

Dataset layout: ``<root>/clean/<name>`` paired with ``<root>/noisy/<name>``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import rng
from .errors import ConfigError, ContractError


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            raise ContractError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"{path}: expected an RGB image, got shape {arr.shape}")
    return arr


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path, float_sidecar: bool = False) -> Path:
    """Write an 8-bit PNG; optionally also ``<stem>.npy`` with float32 values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)
    if float_sidecar:
        np.save(path.with_suffix(".npy"), np.asarray(img, dtype=np.float32))
    return path


@dataclass
class PairedDataset:
    """Sorted (clean, noisy) file pairs with an in-memory image cache."""

    entries: list[tuple[Path, Path]]
    patch: int = 64
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return [c.stem for c, _ in self.entries]

    def pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in self._cache:
            c, n = self.entries[i]
            clean, noisy = load_image(c), load_image(n)
            if clean.shape != noisy.shape:
                raise ContractError(f"pair {c.name}: shape {clean.shape} vs {noisy.shape}")
            self._cache[i] = (clean, noisy)
        return self._cache[i]

    def with_patch(self, patch: int, seed: int | None = None) -> "PairedDataset":
        return PairedDataset(self.entries, patch, self.seed if seed is None else seed, self._cache)


def load_paired_dataset(
    root: str | Path, pattern: str = "*.png", patch: int = 64, seed: int = 0, validate: bool = True
) -> PairedDataset:
    """Pair ``root/clean/*`` with ``root/noisy/*`` by file name.

    Raises:
        ConfigError: missing directories or no pairs.
        ContractError: a file without a partner, an unreadable file, or a pair
            whose images differ in shape (the message names the file).
    """
    root = Path(root)
    cdir, ndir = root / "clean", root / "noisy"
    if not cdir.is_dir() or not ndir.is_dir():
        raise ConfigError(f"{root} must contain clean/ and noisy/ directories")
    clean = {p.name: p for p in cdir.glob(pattern)}
    noisy = {p.name: p for p in ndir.glob(pattern)}
    if not clean and not noisy:
        raise ConfigError(f"empty dataset at {root}")
    unmatched = sorted(set(clean) ^ set(noisy))
    if unmatched:
        raise ContractError(f"unmatched file(s) in {root}: {', '.join(unmatched)}")
    ds = PairedDataset([(clean[k], noisy[k]) for k in sorted(clean)], patch=patch, seed=seed)
    if validate:
        for i in range(len(ds)):
            ds.pair(i)
    return ds


def sample_patch_batch(ds: PairedDataset, batch: int, iteration: int, return_origins: bool = False):
    """Random crops keyed by ``(ds.seed, iteration)``.

    Returns:
        ``(clean, noisy)``, each ``(batch, patch, patch, 3)``, plus the list of
        ``(image, y, x)`` crop origins when ``return_origins``.
    """
    if len(ds) == 0:
        raise ConfigError("empty dataset")
    shapes = [ds.pair(i)[0].shape for i in range(len(ds))]
    eligible = [i for i, s in enumerate(shapes) if s[0] >= ds.patch and s[1] >= ds.patch]
    if not eligible:
        raise ConfigError(f"patch {ds.patch} larger than every image")
    g = rng.generator(ds.seed, "patch-batch", iteration)
    P = ds.patch
    cb = np.empty((batch, P, P, 3))
    nb = np.empty((batch, P, P, 3))
    origins = []
    for b in range(batch):
        i = eligible[int(g.integers(len(eligible)))]
        clean, noisy = ds.pair(i)
        y = int(g.integers(clean.shape[0] - P + 1))
        x = int(g.integers(clean.shape[1] - P + 1))
        cb[b] = clean[y : y + P, x : x + P]
        nb[b] = noisy[y : y + P, x : x + P]
        origins.append((i, y, x))
    if return_origins:
        return cb, nb, origins
    return cb, nb


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 flips/rotations of the leading two axes (k in 0..7)."""
    out = np.rot90(img, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return out


# ---------------------------------------------------------------- toy data


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    params: dict

    @classmethod
    def parse(cls, spec: str) -> "NoiseModel":
        """Parse ``kind:k=v,k=v`` (e.g. ``heteroscedastic:a=0.01,b=0.0004``)."""
        kind, _, rest = spec.partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            k, _, v = item.partition("=")
            try:
                params[k.strip()] = float(v)
            except ValueError as exc:
                raise ConfigError(f"bad noise parameter '{item}'") from exc
        return cls.create(kind.strip(), **params)

    @classmethod
    def create(cls, kind: str, **params) -> "NoiseModel":
        required = {"gaussian": {"sigma"}, "heteroscedastic": {"a", "b"}, "correlated": {"a", "b"}}
        optional = {"gaussian": set(), "heteroscedastic": set(), "correlated": {"kernel", "width"}}
        if kind not in required:
            raise ConfigError(f"unknown noise model '{kind}'")
        missing = required[kind] - set(params)
        extra = set(params) - required[kind] - optional[kind]
        if missing or extra:
            raise ConfigError(f"noise model {kind}: missing {sorted(missing)}, unexpected {sorted(extra)}")
        if kind == "gaussian" and params["sigma"] < 0:
            raise ConfigError("sigma must be >= 0")
        if kind in ("heteroscedastic", "correlated") and (params["a"] < 0 or params["b"] < 0):
            raise ConfigError("a and b must be >= 0")
        if kind == "correlated":
            params.setdefault("kernel", 3.0)
            params.setdefault("width", 1.0)
            if int(params["kernel"]) % 2 == 0 or params["kernel"] < 1 or params["width"] <= 0:
                raise ConfigError("kernel must be an odd size >= 1 and width > 0")
        return cls(kind, dict(params))

    def variance(self, clean: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            return np.full_like(clean, self.params["sigma"] ** 2)
        return self.params["a"] * clean + self.params["b"]

    def kernel(self) -> np.ndarray:
        k = int(self.params["kernel"])
        x = np.arange(k) - k // 2
        g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * self.params["width"] ** 2))
        return g / np.sqrt((g**2).sum())  # unit L2 norm keeps per-pixel variance

    def sample(self, clean: np.ndarray, gen: np.random.Generator, gain: float = 1.0) -> np.ndarray:
        """Noise field (not clipped) for ``clean``; ``gain`` scales the std."""
        white = gen.standard_normal(clean.shape)
        if self.kind == "correlated":
            k = self.kernel()
            white = np.stack([ndimage.convolve(white[..., c], k, mode="wrap") for c in range(3)], axis=-1)
        return gain * np.sqrt(self.variance(clean)) * white

    def describe(self) -> dict:
        return {"kind": self.kind, **self.params}


def synth_clean(size: int, gen: np.random.Generator) -> np.ndarray:
    """Smooth gradient + a few flat shapes + faint texture, values in [0.1, 0.9]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, d = gen.uniform(-0.3, 0.3, 3)
        img[..., c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + d * (xx - 0.5) * (yy - 0.5)
    for _ in range(int(gen.integers(2, 5))):
        color = gen.uniform(0.15, 0.85, 3)
        cy, cx = gen.uniform(0, 1, 2)
        r = gen.uniform(0.1, 0.3)
        if gen.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * gen.uniform(0.5, 1.5))
        img[mask] = 0.5 * img[mask] + 0.5 * color
    fy, fx = gen.uniform(2, 10, 2)
    phase = gen.uniform(0, 2 * np.pi)
    img += 0.03 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[..., None]
    return np.clip(img, 0.1, 0.9)


def make_toy_dataset(
    n_images: int,
    size: int,
    noise_model: str | NoiseModel,
    seed: int,
    out_dir: str | Path,
    gains: Sequence[float] = (1.0,),
    offset: int = 0,
) -> Path:
    """Write a synthetic paired dataset plus a ``model.json`` sidecar.

    Image ``i`` (global index ``offset + i``) gets gain ``gains[(offset + i) % len(gains)]``,
    so disjoint splits drawn with different offsets share one generator family.
    """
    model = noise_model if isinstance(noise_model, NoiseModel) else NoiseModel.parse(noise_model)
    if n_images < 1 or size < 8:
        raise ConfigError("need n_images >= 1 and size >= 8")
    if not gains or any(g <= 0 for g in gains):
        raise ConfigError("gains must be positive")
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    images = []
    for i in range(n_images):
        idx = offset + i
        clean = synth_clean(size, rng.generator(seed, "toy-clean", idx))
        clean = to_uint8(clean) / 255.0  # noise is added to the stored clean values
        gain = float(gains[idx % len(gains)])
        noise = model.sample(clean, rng.generator(seed, "toy-noise", idx), gain)
        noisy = clean + noise
        name = f"toy_{idx:05d}.png"
        save_image(clean, out / "clean" / name)
        save_image(noisy, out / "noisy" / name)
        images.append({"name": name, "gain": gain})
    meta = {"seed": seed, "size": size, "model": model.describe(), "gains": list(gains), "images": images}
    (out / "model.json").write_text(json.dumps(meta, indent=1))
    return out


def read_toy_metadata(root: str | Path) -> dict:
    return json.loads((Path(root) / "model.json").read_text())


_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def safe_name(name: str) -> str:
    return _SAFE.sub("_", name)
