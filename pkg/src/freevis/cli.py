"""Command line entry point: ``freevis <command> <file>``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .errors import ConfigError, FormatError, InvalidTensor, NumericalError, ShapeError
from .frequency import spectrum_csv, spectrum_profile
from .latents import load_grid, save_grid
from .synthetic import SyntheticSpec, write_synthetic

log = logging.getLogger("freevis")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _load_json(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def cmd_gen_synthetic(args):
    path = Path(args.spec)
    spec = SyntheticSpec.from_dict(_load_json(path))
    out = Path(spec.output_dir)
    if not out.is_absolute():
        out = path.parent / out
    for name, p in write_synthetic(spec, out).items():
        print(f"{name}\t{p}")


def cmd_invert(args):
    cfg = P.RunConfig.load(args.config)
    content, _, _ = P.load_inputs(cfg)
    x0 = cfg.codec().encode_video(content).astype(np.float64)
    noise, traj = P.euler_invert(cfg.denoiser(), x0, cfg.schedule(), cfg.fixed_point_iters)
    out = cfg.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    save_grid(noise.astype(np.float32), out / "noise.fvg4")
    # steps+1 latents of S maps each, stacked along the first axis
    save_grid(np.concatenate(traj).astype(np.float32), out / "trajectory.fvg4")
    print(f"noise\t{out / 'noise.fvg4'}")
    print(f"trajectory\t{out / 'trajectory.fvg4'}")


def cmd_stylize(args):
    cfg = P.RunConfig.load(args.config)
    res = P.stylize(cfg)
    for name, p in res.files.items():
        print(f"{name}\t{p}")
    print(f"digest\t{res.digest()}")


def cmd_masks(args):
    cfg = P.RunConfig.load(args.config)
    _, _, flows = P.load_inputs(cfg)
    den = cfg.denoiser()
    token_hw = den.token_hw(cfg.height, cfg.width)
    refs = P.arrange_references(cfg.frames, cfg.r, cfg.dp, cfg.reference_policy, token_hw)
    n_maps = 1 + (cfg.frames - 1) // cfg.r
    masks = P.build_masks(flows, refs, cfg.patch, cfg.r, cfg.dp, n_maps, token_hw, cfg.dilation_radius)
    out = cfg.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    for name, p in P.write_masks(out, masks).items():
        print(f"{name}\t{p}")


def cmd_diagnose_attn(args):
    cfg = P.RunConfig.load(args.config)
    content, _, _ = P.load_inputs(cfg)
    x0 = cfg.codec().encode_video(content).astype(np.float64)
    den = cfg.denoiser()
    sched = cfg.schedule()
    sigma = float(sched.sigmas[-2])
    # content latent noised to the last step's level on the rectified-flow path
    eps = np.random.default_rng(cfg.seed).standard_normal(x0.shape)
    x = (1.0 - sigma) * x0 + sigma * eps
    weights, pos = P.attention_maps(den, x, sigma)
    out = cfg.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    for name, p in P.write_attention_csvs(out, weights, pos, args.query).items():
        print(f"{name}\t{p}")


def cmd_spectrum(args):
    sys.stdout.write(spectrum_csv(spectrum_profile(load_grid(args.grid))))


def build_parser():
    ap = argparse.ArgumentParser(prog="freevis", description="Training-free video stylization guidance on a toy denoiser.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-synthetic", help="write a synthetic content/stylized/flow triple")
    p.add_argument("spec")
    p.set_defaults(func=cmd_gen_synthetic)
    for name, func, hlp in (
        ("invert", cmd_invert, "invert the content latent, write noise and trajectory"),
        ("stylize", cmd_stylize, "run the two-branch stylization loop"),
        ("masks", cmd_masks, "build and write reference, flow and combined masks"),
        ("diagnose-attn", cmd_diagnose_attn, "write temporal/spatial attention summaries"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("config")
        p.set_defaults(func=func)
    sub.choices["diagnose-attn"].add_argument("--query", type=int, default=0, help="query token for the spatial map")
    p = sub.add_parser("spectrum", help="radial FFT magnitude profile of a grid file, as CSV")
    p.add_argument("grid")
    p.set_defaults(func=cmd_spectrum)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, InvalidTensor, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
