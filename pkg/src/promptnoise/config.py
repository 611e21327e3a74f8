"""Run configuration: one nested TOML document per run.

Unknown keys are rejected and values are coerced to the type of their default.
The fingerprint is a SHA-256 over the canonical (key-sorted) JSON encoding, so
key order in the file does not matter.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {
        "root": "",
        "val_root": "",
        "pattern": "*.png",
    },
    "pae": {
        "channels": [64, 128, 256, 256],
        "global_channels": 32,
        "local_channels": 32,
        "latent_channels": 4,
        "res_blocks": 1,
        "rho": 7,
        "base_size": 64,
        "shortcut": False,
        "lambda_z": 1e-4,
        "lr": 1e-4,
        "lr_min": 1e-6,
        "iterations": 2000,
        "batch": 8,
        "patch": 64,
        "checkpoint_every": 0,
        "log_every": 50,
    },
    "pdit": {
        "num_blocks": 4,
        "hidden_dim": 128,
        "num_heads": 4,
        "token_patch": 1,
        "mlp_ratio": 4.0,
        "dropout": 0.1,
        "cond_channels": 32,
        "cond_noise_std": 0.05,
        "cond_downsample": 2,
    },
    "cm": {
        "s0": 10,
        "s1": 160,
        "floored_curriculum": False,
        "tau": 7.0,
        "sigma_min": 0.002,
        "sigma_max": 80.0,
        "p_mean": -1.1,
        "p_std": 2.0,
        "sigma_data": 0.5,
        "ema_decay": 0.9999,
        "lr": 2e-4,
        "grad_clip": 1.0,
        "iterations": 3000,
        "batch": 16,
        "patch": 64,
        "stats_batches": 100,
        "checkpoint_every": 0,
        "log_every": 50,
    },
    "generate": {
        "mode": "paired",
        "multiplier": 1,
        "float_sidecar": False,
    },
    "denoise": {
        "depth": 8,
        "width": 32,
        "patch": 48,
        "batch": 8,
        "iterations": 2000,
        "lr": 1e-3,
        "lr_min": 1e-5,
        "mix_ratio": 0.0,
        "log_every": 50,
    },
}

PRESETS: dict[str, dict[str, Any]] = {
    # paper-scale architecture / optimisation settings
    "paper": {
        "pae": {"iterations": 400_000, "batch": 64, "patch": 256, "base_size": 256},
        "pdit": {"num_blocks": 8, "hidden_dim": 384, "num_heads": 6},
        "cm": {"iterations": 250_000, "batch": 512, "patch": 256},
        "denoise": {"depth": 17, "width": 64, "patch": 96, "iterations": 100_000},
    },
    "desk": {},
    # 64x64 toy data: a small trunk plus a latent wide enough to hold the residual
    "toy": {
        "pae": {"channels": [16, 32, 64, 64], "global_channels": 8, "local_channels": 8,
                "latent_channels": 192, "shortcut": True, "lr": 1e-3, "iterations": 1000},
        "cm": {"iterations": 8000, "lr": 1e-3, "ema_decay": 0.999, "stats_batches": 20},
    },
}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        default = base[k]
        if isinstance(default, dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"'{where}' must be a table")
            _merge(default, v, where + ".")
        else:
            base[k] = _coerce(default, v, where)
    return base


def _coerce(default, value, where):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [x for x in value.replace(",", " ").split()]
            return [_coerce(default[0], x, where) for x in value] if default else list(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for '{where}': {value!r}") from exc


class RunConfig:
    """Nested configuration with attribute-free dict access (``cfg["pae"]["lr"]``)."""

    def __init__(self, data: Mapping | None = None, preset: str = "desk"):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}'")
        self.data = _merge(copy.deepcopy(DEFAULTS), PRESETS[preset])
        if data:
            _merge(self.data, data)

    def __getitem__(self, key):
        return self.data[key]

    @classmethod
    def load(cls, path: str | Path, preset: str = "desk") -> "RunConfig":
        with open(path, "rb") as fh:
            try:
                doc = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls(doc, preset=preset)

    @classmethod
    def from_string(cls, text: str) -> "RunConfig":
        return cls(tomli.loads(text))

    def override(self, dotted: Mapping[str, Any]) -> "RunConfig":
        """Return a copy with ``{"section.key": value}`` overrides applied."""
        nested: dict[str, Any] = {}
        for k, v in dotted.items():
            node = nested
            parts = k.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = v
        out = RunConfig.__new__(RunConfig)
        out.data = _merge(copy.deepcopy(self.data), nested)
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @property
    def fingerprint(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.data == other.data

    def __repr__(self):
        return f"RunConfig(fingerprint={self.fingerprint[:12]})"
