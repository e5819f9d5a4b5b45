"""Command-line entry point: phantom generation, simulation, restoration and reports.

Every command accepts ``--config`` (a JSON document), ``--seed`` and ``--out``.
Explicit flags override config keys.  Exit codes: 0 success, 2 validation
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .core import read_cube, read_pan, write_cube
from .degrade import NoiseSpec, SpectralResponse, add_noise, downsample, simulate_observation
from .metrics import evaluate, psnr
from .nets import ArchConfig, save_state
from .phantom import make_phantom
from .prior import detail_map, energy_curve, noisy_detail_map
from .train import ABLATION_FLAGS, NumericalAbort, TrainConfig, run_restoration

log = logging.getLogger("hipandas")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ helpers

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out: Path, command: str, config: dict, files: list[str], **extra) -> dict:
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(config),
        "config": config,
        "files": sorted(files),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    return config


def _override(config: dict, **flags) -> dict:
    out = dict(config)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _existing(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what} path")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _build(cls, d: dict | None, **defaults):
    d = {**defaults, **(d or {})}
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if cls is NoiseSpec:
        return NoiseSpec.from_dict(d)
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return cls(**d)


def noise_from(config: dict, seed: int) -> NoiseSpec:
    return _build(NoiseSpec, config.get("noise"), seed=seed)


def response_from(config: dict, bands: int) -> SpectralResponse:
    weights = config.get("response")
    if weights is None:
        return SpectralResponse.uniform(bands)
    if len(weights) != bands:
        raise ConfigError(f"response has {len(weights)} weights for {bands} bands")
    return SpectralResponse.normalized(weights)


def train_from(config: dict, seed: int, ablation: dict | None = None) -> TrainConfig:
    d = {**(config.get("train") or {}), **(ablation or {})}
    return _build(TrainConfig, d, seed=seed)


def stretch(band: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(band, [2, 98])
    if hi <= lo:
        return np.zeros(band.shape, np.uint8)
    return np.round(255 * np.clip((band - lo) / (hi - lo), 0, 1)).astype(np.uint8)


def write_preview(cube: np.ndarray, path: Path, rgb=None) -> None:
    """False-colour PNG with a per-band 2/98 percentile stretch."""
    cube = np.atleast_3d(cube)
    b = cube.shape[2]
    rgb = rgb if rgb is not None else [b - 1, b // 2, 0]
    if len(rgb) != 3 or not all(0 <= i < b for i in rgb):
        raise ConfigError(f"preview bands {rgb} invalid for {b} bands")
    img = np.stack([stretch(cube[:, :, i]) for i in rgb], axis=-1)
    Image.fromarray(img, mode="RGB").save(path)


def _out_dir(path) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_seed(seed) -> int:
    if seed is None:
        raise ConfigError("--seed is required for this command")
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    return seed


# ----------------------------------------------------------------- commands

def cmd_make_phantom(args) -> int:
    config = load_config(args.config)
    p = _override(config.get("phantom", {}), height=args.height, width=args.width,
                  bands=args.bands, rank=args.rank, seed=args.seed)
    p = {"height": 64, "width": 64, "bands": 8, "rank": 3, "seed": 0, **p}
    out = _out_dir(args.out)
    H = make_phantom(p["height"], p["width"], p["bands"], p["rank"], p["seed"])
    write_cube(H, out / "H.hicube")
    write_manifest(out, "make-phantom", {"phantom": p}, ["H.hicube"])
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = _require_seed(args.seed)
    config = _override(load_config(args.config), input=args.input, ratio=args.ratio)
    if args.sigma is not None:
        config["noise"] = {**config.get("noise", {}), "sigma": args.sigma}
    H = read_cube(_existing(config.get("input"), "input cube")).values
    s = int(config.get("ratio", 4))
    spec = noise_from(config, seed)
    phi = response_from(config, H.shape[2])
    N, P, Q = simulate_observation(H, s, phi, spec)
    out = _out_dir(args.out)
    for name, arr in (("N", N), ("P", P), ("Q", Q)):
        write_cube(arr, out / f"{name}.hicube")
    record = {**config, "input": str(config["input"]), "ratio": s, "seed": seed}
    write_manifest(out, "simulate", record, ["N.hicube", "P.hicube", "Q.hicube"],
                   noise=spec.to_dict(), seed=seed)
    return EXIT_OK


def _restore_inputs(config: dict):
    d = _existing(config.get("observation"), "observation directory")
    N = read_cube(d / "N.hicube").values
    P = read_pan(d / "P.hicube").values
    Q = read_pan(d / "Q.hicube").values
    return N, P, Q


def cmd_restore(args) -> int:
    seed = _require_seed(args.seed)
    config = _override(load_config(args.config), observation=args.observation)
    train = dict(config.get("train") or {})
    for key in ("stage1_epochs", "stage2_epochs"):
        if getattr(args, key) is not None:
            train[key] = getattr(args, key)
    for flag in ABLATION_FLAGS:
        if getattr(args, flag):
            train[flag] = True
    config["train"] = train
    if args.channels is not None:
        config["arch"] = {**config.get("arch", {}), "channels": args.channels}

    N, P, Q = _restore_inputs(config)
    arch = _build(ArchConfig, config.get("arch"))
    tc = train_from(config, seed)
    out = _out_dir(args.out)
    record = {**config, "observation": str(config["observation"]), "seed": seed}
    try:
        result = run_restoration(N, P, Q, arch, tc, progress=args.verbose)
    except NumericalAbort as exc:
        (out / "trace.csv").write_text(exc.trace.to_csv())
        write_manifest(out, "restore", record, ["trace.csv"], aborted_at=exc.epoch,
                       components=exc.components)
        raise

    files = ["trace.csv", "L_hat.hicube", "L_hat.png", "state"]
    (out / "trace.csv").write_text(result.trace.to_csv())
    write_cube(np.clip(result.L_hat, 0, 1), out / "L_hat.hicube")
    rgb = config.get("preview_bands")
    write_preview(result.L_hat, out / "L_hat.png", rgb)
    if result.H_hat is not None:
        write_cube(np.clip(result.H_hat, 0, 1), out / "H_hat.hicube")
        write_preview(result.H_hat, out / "H_hat.png", rgb)
        files += ["H_hat.hicube", "H_hat.png"]
    save_state(result.state, out / "state")
    write_manifest(out, "restore", record, files, seed=seed)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ref = read_cube(_existing(args.ref, "reference cube")).values
    est = read_cube(_existing(args.est, "estimate cube")).values
    report = evaluate(ref, est, args.ratio)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = _out_dir(args.out)
        (out / "metrics.json").write_text(text)
        write_manifest(out, "evaluate", {"ref": str(args.ref), "est": str(args.est), "ratio": args.ratio},
                       ["metrics.json"])
    sys.stdout.write(text)
    return EXIT_OK


def energy_rows(H: np.ndarray, N: np.ndarray, s: int) -> str:
    E_clean = energy_curve(detail_map(H, s))
    E_noisy = energy_curve(noisy_detail_map(H, N, s))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "E_clean", "E_noisy"])
    for k, (c, n) in enumerate(zip(E_clean, E_noisy), start=1):
        writer.writerow([k, repr(float(c)), repr(float(n))])
    return buf.getvalue()


def cmd_energy_curve(args) -> int:
    config = _override(load_config(args.config), input=args.input, ratio=args.ratio)
    if args.sigma is not None:
        config["noise"] = {**config.get("noise", {}), "sigma": args.sigma}
    H = read_cube(_existing(config.get("input"), "input cube")).values
    s = int(config.get("ratio", 4))
    if args.noisy is not None:
        N = read_cube(_existing(args.noisy, "noisy cube")).values
    else:
        N = add_noise(downsample(H, s), noise_from(config, _require_seed(args.seed)))
    text = energy_rows(H, N, s)
    out = _out_dir(args.out)
    (out / "energy.csv").write_text(text)
    write_manifest(out, "energy-curve", {**config, "input": str(config["input"]), "seed": args.seed},
                   ["energy.csv"])
    return EXIT_OK


# --------------------------------------------------------------- experiment

EXPERIMENT_COLUMNS = ["index", "noise", "ablation", "seeds", "psnr", "ssim", "ergas", "sam",
                      "psnr_L", "aborted"]


def _parse_ablation(name: str) -> dict:
    if name == "full":
        return {}
    flags = name.split("+")
    bad = [f for f in flags if f not in ABLATION_FLAGS]
    if bad:
        raise ConfigError(f"unknown ablation flags {bad}; expected 'full' or a '+'-join of {ABLATION_FLAGS}")
    return {f: True for f in flags}


def run_cell(H: np.ndarray, s: int, phi: SpectralResponse, noise: dict, ablation: str,
             arch: ArchConfig, train: dict, seeds: list[int]) -> dict:
    """Simulate, restore and score one grid cell; metrics are averaged over seeds."""
    L = downsample(H, s)
    reports, aborted = [], 0
    for seed in seeds:
        spec = _build(NoiseSpec, noise, seed=seed)
        N, P, Q = simulate_observation(H, s, phi, spec)
        tc = _build(TrainConfig, {**train, **_parse_ablation(ablation)}, seed=seed)
        try:
            result = run_restoration(N, P, Q, arch, tc)
        except NumericalAbort:
            aborted += 1
            continue
        if result.H_hat is not None:
            rep = evaluate(H, np.clip(result.H_hat, 0, 1), s)
        else:
            rep = {k: float("nan") for k in ("psnr", "ssim", "ergas", "sam")}
        rep["psnr_L"] = psnr(L, np.clip(result.L_hat, 0, 1))
        reports.append(rep)
    row = {"noise": _build(NoiseSpec, noise).label, "ablation": ablation, "seeds": len(seeds),
           "aborted": aborted}
    for key in ("psnr", "ssim", "ergas", "sam", "psnr_L"):
        row[key] = float(np.mean([r[key] for r in reports])) if reports else float("nan")
    return row


def experiment_grid(config: dict, seed: int) -> list[tuple]:
    grid = config.get("grid") or {}
    noises = grid.get("noise") or [config.get("noise") or {"sigma": 10}]
    ablations = grid.get("ablations") or ["full"]
    for a in ablations:
        _parse_ablation(a)
    for n in noises:
        _build(NoiseSpec, n)
    seeds = grid.get("seeds") or [seed]
    return [(n, a, seeds) for n in noises for a in ablations]


def experiment_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, EXPERIMENT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def cmd_experiment(args) -> int:
    seed = _require_seed(args.seed)
    config = _override(load_config(args.config), input=args.input)
    H = read_cube(_existing(config.get("input"), "input cube")).values
    s = int(config.get("ratio", 4))
    phi = response_from(config, H.shape[2])
    arch = _build(ArchConfig, config.get("arch"))
    train = dict(config.get("train") or {})
    cells = experiment_grid(config, seed)
    jobs = [(H, s, phi, n, a, arch, train, seeds) for n, a, seeds in cells]

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_cell, *zip(*jobs)))  # map keeps grid order
    else:
        rows = [run_cell(*job) for job in jobs]
    for i, row in enumerate(rows):
        row["index"] = i
    out = _out_dir(args.out)
    (out / "experiment.csv").write_text(experiment_csv(rows))
    write_manifest(out, "experiment", {**config, "input": str(config["input"]), "seed": seed},
                   ["experiment.csv"])
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hipandas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("make-phantom", help="write a textured low-rank phantom cube"))
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--rank", type=int)
    p.set_defaults(func=cmd_make_phantom)

    p = common(sub.add_parser("simulate", help="degrade an HR cube into N, P and Q"))
    p.add_argument("--input", help="HR hyperspectral cube (.hicube)")
    p.add_argument("--ratio", type=int)
    p.add_argument("--sigma", type=float, help="noise level on the 0-255 scale")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("restore", help="zero-shot denoising and super-resolution"))
    p.add_argument("--observation", help="directory holding N/P/Q.hicube")
    p.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    p.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
    p.add_argument("--channels", type=int)
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true")
    p.set_defaults(func=cmd_restore)

    p = common(sub.add_parser("evaluate", help="PSNR, SSIM, ERGAS and SAM as JSON"))
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--ratio", type=float, default=4)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("energy-curve", help="CSV of clean vs noisy detail-map energy"))
    p.add_argument("--input", help="HR hyperspectral cube (.hicube)")
    p.add_argument("--noisy", help="noisy LR cube; simulated from the config when omitted")
    p.add_argument("--ratio", type=int)
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_energy_curve)

    p = common(sub.add_parser("experiment", help="noise x ablation grid to CSV"))
    p.add_argument("--input", help="HR hyperspectral cube (.hicube)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
