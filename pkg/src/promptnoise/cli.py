"""Command-line entry point: ``promptnoise <subcommand> ...``.

Configuration precedence: defaults < preset < ``--config`` file <
``PROMPTNOISE_SEED`` (seed only) < explicit flags and ``--set key=value``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig
from .errors import ConfigError, ContractError, TrainingError

log = logging.getLogger("promptnoise")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. pae.lr=1e-3")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="promptnoise", description="Metadata-free sRGB noise synthesis toolkit.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-toy", help="write a synthetic paired dataset")
    _common(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", default="heteroscedastic:a=0.01,b=0.0004", help="kind:k=v,... model spec")
    p.add_argument("--gains", default="1.0", help="comma-separated per-image std multipliers (cycled)")
    p.add_argument("--offset", type=int, default=0, help="global index of the first image")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-pae", help="train the prompt autoencoder")
    _common(p)
    p.add_argument("--data", type=Path, help="paired dataset root (overrides data.root)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-pdit", help="consistency-train the Prompt DiT")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--pae", type=Path, required=True, help="autoencoder checkpoint directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("generate", help="synthesize noisy images for a clean set")
    _common(p)
    p.add_argument("--mode", choices=("paired", "unpaired"))
    p.add_argument("--clean-dir", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--noisy-dir", type=Path, help="aligned real noisy images (paired mode)")
    src.add_argument("--noise-bank", type=Path, help=".npz bank or a paired dataset root (unpaired mode)")
    p.add_argument("--multiplier", type=int)
    p.add_argument("--pdit", type=Path, required=True)
    p.add_argument("--pae", type=Path, required=True)
    p.add_argument("--float-sidecar", action="store_true", default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval-noise", help="per-image KLD/AKLD of generated vs real noise")
    _common(p)
    p.add_argument("--clean-dir", type=Path, required=True)
    p.add_argument("--real-dir", type=Path, required=True)
    p.add_argument("--gen-dir", type=Path, required=True, help="<stem>.png or <stem>_<r>.png per clean image")
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--out", type=Path, help="CSV path (default: standard output)")

    p = sub.add_parser("train-denoiser", help="train the DnCNN-style denoiser")
    _common(p)
    p.add_argument("--real", type=Path, help="real paired dataset root")
    p.add_argument("--synth", type=Path, help="synthetic paired dataset root")
    p.add_argument("--mix-ratio", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval-denoiser", help="PSNR/SSIM report on a paired test set")
    _common(p)
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--ckpt", type=Path)
    who.add_argument("--identity", action="store_true", help="evaluate the noisy input itself")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, help="CSV path (default: standard output)")

    p = sub.add_parser("schedule", help="noise-schedule utilities")
    ssub = p.add_subparsers(dest="action", parser_class=_Parser)
    d = ssub.add_parser("dump", help="CSV of t, sigma, p(t), lambda for N levels")
    _common(d)
    d.add_argument("--n", type=int, required=True)
    return ap


def _parse_set(items) -> dict:
    out = {}
    for item in items:
        k, sep, v = item.partition("=")
        if not sep or not k:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        out[k.strip()] = v.strip()
    return out


def resolve_config(args, flags: dict | None = None) -> RunConfig:
    cfg = RunConfig.load(args.config, args.preset) if args.config else RunConfig(preset=args.preset)
    env = os.environ.get("PROMPTNOISE_SEED")
    if env is not None:
        try:
            cfg = cfg.override({"seed": int(env)})
        except ValueError as exc:
            raise ConfigError(f"PROMPTNOISE_SEED must be an integer, got '{env}'") from exc
    over = {k: v for k, v in (flags or {}).items() if v is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    over.update(_parse_set(args.set))
    return cfg.override(over) if over else cfg


def _dataset(root, cfg, patch=64, seed=None):
    from .data import load_paired_dataset

    if not root:
        raise ConfigError("no dataset given (use --data or data.root)")
    return load_paired_dataset(root, cfg["data"]["pattern"], patch, cfg["seed"] if seed is None else seed)


def _write_csv(rows, fields, path):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if path:
            fh.close()


# ----------------------------------------------------------------- commands


def cmd_make_toy(args) -> int:
    from .data import make_toy_dataset

    cfg = resolve_config(args)
    try:
        gains = [float(g) for g in args.gains.split(",") if g.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --gains '{args.gains}'") from exc
    out = make_toy_dataset(args.n, args.size, args.noise, cfg["seed"], args.out, gains, args.offset)
    log.info("make-toy wrote n=%d size=%d to %s", args.n, args.size, out)
    return EXIT_OK


def cmd_train_pae(args) -> int:
    from .pae import train_pae

    cfg = resolve_config(args, {
        "data.root": str(args.data) if args.data else None,
        "pae.iterations": args.iterations, "pae.lr": args.lr, "pae.batch": args.batch, "pae.patch": args.patch,
    })
    ds = _dataset(cfg["data"]["root"], cfg, cfg["pae"]["patch"])
    ck = train_pae(ds, cfg, args.out)
    log.info("train-pae done iterations=%d final_loss=%.6f out=%s", ck.iteration, ck.tensors["history.loss"][-1], args.out)
    return EXIT_OK


def cmd_train_pdit(args) -> int:
    from . import checkpoint as ckpt_io
    from .cmtrain import train_pdit

    pae_ck = ckpt_io.load(args.pae, kind="pae")
    cfg = resolve_config(args, {
        "data.root": str(args.data) if args.data else None,
        "cm.iterations": args.iterations, "cm.lr": args.lr, "cm.batch": args.batch, "cm.patch": args.patch,
    })
    if not args.config:
        # inherit the autoencoder's architecture when no config file is given
        cfg = cfg.override({f"pae.{k}": v for k, v in pae_ck.config["pae"].items()})
    ds = _dataset(cfg["data"]["root"], cfg, cfg["cm"]["patch"])
    ck = train_pdit(ds, pae_ck, cfg, args.out)
    log.info("train-pdit done iterations=%d out=%s", ck.iteration, args.out)
    return EXIT_OK


def cmd_generate(args) -> int:
    from .data import load_paired_dataset
    from .genpipe import NoiseBank, NoiseGenerator, synthesize_dataset

    cfg = resolve_config(args, {
        "generate.mode": args.mode, "generate.multiplier": args.multiplier, "generate.float_sidecar": args.float_sidecar,
    })
    g = cfg["generate"]
    mode = g["mode"]
    if mode == "paired" and args.noisy_dir is None:
        raise ConfigError("paired mode needs --noisy-dir")
    if mode == "unpaired" and args.noise_bank is None:
        raise ConfigError("unpaired mode needs --noise-bank")
    if mode not in ("paired", "unpaired"):
        raise ConfigError(f"unknown generation mode '{mode}'")
    gen = NoiseGenerator.from_checkpoints(args.pdit, args.pae)
    bank = None
    if mode == "unpaired":
        if args.noise_bank.is_dir():
            bank = NoiseBank.from_dataset(load_paired_dataset(args.noise_bank, cfg["data"]["pattern"]))
        else:
            bank = NoiseBank.load(args.noise_bank)
    rows = synthesize_dataset(
        args.clean_dir, args.out, gen, cfg["seed"], g["multiplier"],
        noisy_dir=args.noisy_dir if mode == "paired" else None, bank=bank,
        pattern=cfg["data"]["pattern"], float_sidecar=g["float_sidecar"],
    )
    sat = np.mean([r["saturation"] for r in rows])
    log.info("generate mode=%s images=%d mean_saturation=%.4f out=%s", mode, len(rows), sat, args.out)
    return EXIT_OK


def _load_residual_image(path: Path) -> np.ndarray:
    from .data import load_image

    side = path.with_suffix(".npy")
    return load_image(side if side.exists() else path)


def cmd_eval_noise(args) -> int:
    from .data import load_image
    from .noisestats import NoiseHistogram, kld_from_histograms, residual

    cfg = resolve_config(args)
    pattern = cfg["data"]["pattern"]
    rows = []
    for cpath in sorted(args.clean_dir.glob(pattern)):
        clean = load_image(cpath)
        real = load_image(args.real_dir / cpath.name)
        stem = re.escape(cpath.stem)
        gens = sorted(p for p in args.gen_dir.glob(cpath.stem + "*.png") if re.fullmatch(stem + r"(_\d+)?", p.stem))
        if not gens:
            raise ContractError(f"no generated image for {cpath.name} in {args.gen_dir}")
        p = NoiseHistogram.from_values(residual(real, clean), args.bins)
        klds = [
            kld_from_histograms(p, NoiseHistogram.from_values(residual(_load_residual_image(g), clean), args.bins))
            for g in gens
        ]
        rows.append({"image_id": cpath.stem, "kld": klds[0], "akld": float(np.mean(klds)), "samples": len(klds)})
    if not rows:
        raise ConfigError(f"no clean images in {args.clean_dir}")
    rows.append({
        "image_id": "mean",
        "kld": float(np.mean([r["kld"] for r in rows])),
        "akld": float(np.mean([r["akld"] for r in rows])),
        "samples": int(np.sum([r["samples"] for r in rows])),
    })
    _write_csv(rows, ["image_id", "kld", "akld", "samples"], args.out)
    return EXIT_OK


def cmd_train_denoiser(args) -> int:
    from .denoise import train_denoiser

    mix = args.mix_ratio
    if mix is None and args.synth is not None and args.real is None:
        mix = 1.0
    cfg = resolve_config(args, {"denoise.mix_ratio": mix, "denoise.iterations": args.iterations, "denoise.lr": args.lr})
    patch = cfg["denoise"]["patch"]
    real = _dataset(args.real, cfg, patch) if args.real else None
    synth = _dataset(args.synth, cfg, patch) if args.synth else None
    ck = train_denoiser(real, synth, cfg, args.out)
    log.info("train-denoiser done iterations=%d final_loss=%.6f", ck.iteration, ck.tensors["history.loss"][-1])
    return EXIT_OK


def cmd_eval_denoiser(args) -> int:
    from .denoise import REPORT_FIELDS, eval_denoiser, load_denoiser

    cfg = resolve_config(args)
    model = None if args.identity else load_denoiser(args.ckpt)
    res = eval_denoiser(model, _dataset(args.data, cfg))
    rows = [{k: r[k] for k in REPORT_FIELDS} for r in res["rows"]]
    rows.append({"image_id": "mean", "psnr_db": res["psnr_db"], "ssim": res["ssim"]})
    _write_csv(rows, REPORT_FIELDS, args.report)
    log.info("eval-denoiser mean_psnr=%.3f mean_ssim=%.4f", res["psnr_db"], res["ssim"])
    return EXIT_OK


def cmd_schedule(args) -> int:
    from .schedule import SigmaSchedule, TimestepSampler, dump_csv

    if args.action != "dump":
        raise _Usage("schedule needs an action: dump")
    cfg = resolve_config(args)
    c = cfg["cm"]
    sys.stdout.write(dump_csv(args.n, SigmaSchedule(c["sigma_min"], c["sigma_max"], c["tau"]),
                              TimestepSampler(c["p_mean"], c["p_std"])))
    return EXIT_OK


class _Usage(Exception):
    pass


COMMANDS = {
    "make-toy": cmd_make_toy,
    "train-pae": cmd_train_pae,
    "train-pdit": cmd_train_pdit,
    "generate": cmd_generate,
    "eval-noise": cmd_eval_noise,
    "train-denoiser": cmd_train_denoiser,
    "eval-denoiser": cmd_eval_denoiser,
    "schedule": cmd_schedule,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except _Usage as exc:
        print(f"promptnoise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ContractError, TrainingError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
