"""Framework-independent checkpoint directories.

Layout::

    <dir>/manifest.json   format version, kind, iteration, config fingerprint,
                          tensor index (name, dtype, shape, offset, nbytes), extras
    <dir>/params.bin      concatenated little-endian tensor blobs
    <dir>/config.toml     the full run configuration

The archive can be read with nothing but numpy.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .config import RunConfig
from .errors import ConfigError

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "u1", "bool": "?"}


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    config: RunConfig
    iteration: int = 0
    extra: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` as torch tensors with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(p)}


def to_numpy_state(prefix: str, state: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in state.items()}


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    tmp = path / "params.bin.tmp"
    with open(tmp, "wb") as fh:
        for name in sorted(ckpt.tensors):
            arr = np.asarray(ckpt.tensors[name])
            dt = arr.dtype.name
            if dt not in _DTYPES:
                raise ConfigError(f"unsupported dtype {dt} for tensor {name}")
            blob = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
            fh.write(blob)
            index.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    os.replace(tmp, path / "params.bin")
    manifest = {
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "iteration": ckpt.iteration,
        "fingerprint": ckpt.fingerprint,
        "tensors": index,
        "extra": ckpt.extra,
    }
    (path / "config.toml").write_text(ckpt.config.dumps())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load(
    path: str | Path,
    kind: str | None = None,
    expect_fingerprint: str | None = None,
    allow_mismatch: bool = False,
) -> Checkpoint:
    """Read a checkpoint directory.

    Raises:
        ConfigError: missing files, wrong kind, unsupported format version, or a
            fingerprint that differs from ``expect_fingerprint`` (unless
            ``allow_mismatch``).
    """
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        cfg = RunConfig.from_string((path / "config.toml").read_text())
        raw = (path / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise ConfigError(f"incomplete checkpoint at {path}: {exc.filename}") from exc
    if manifest["format_version"] != FORMAT_VERSION and not allow_mismatch:
        raise ConfigError(f"checkpoint format {manifest['format_version']} != {FORMAT_VERSION}")
    if kind is not None and manifest["kind"] != kind:
        raise ConfigError(f"expected a '{kind}' checkpoint, found '{manifest['kind']}'")
    if cfg.fingerprint != manifest["fingerprint"] and not allow_mismatch:
        raise ConfigError("config.toml does not match the recorded fingerprint")
    if expect_fingerprint is not None and manifest["fingerprint"] != expect_fingerprint and not allow_mismatch:
        raise ConfigError(
            f"fingerprint mismatch: checkpoint {manifest['fingerprint'][:12]} vs expected {expect_fingerprint[:12]}"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        buf = raw[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(entry["dtype"])
    return Checkpoint(
        kind=manifest["kind"],
        tensors=tensors,
        config=cfg,
        iteration=manifest["iteration"],
        extra=manifest.get("extra", {}),
        format_version=manifest["format_version"],
    )
