"""Command line: phantom, unfold, sweep and render subcommands.

Exit codes: 0 converged, 1 stage error, 2 usage or config error, 3 not converged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig
from .phantom import PhantomError, PhantomSpec, PhantomTruth, gen_phantom
from .pipeline import (
    EXIT_OK,
    EXIT_STAGE,
    EXIT_USAGE,
    format_sweep,
    run_pipeline,
    run_sweep,
)
from .unfolded_view import RENDER_MODES, UnfoldedVolume, UnfoldError, render_view, write_pgm
from .volume import VolumeFormatError, write_volume

log = logging.getLogger("vunfold")

# flag name -> config key for the overrides shared by unfold and sweep
_OVERRIDES = {
    "scalar": "scalar",
    "labels": "labels",
    "out": "output_dir",
    "cardia": "cardia",
    "pylorus": "pylorus",
    "d": "d",
    "kappa": "kappa",
    "max_iterations": "max_iterations",
    "orientation": "baseline_orientation",
    "render_mode": "render_mode",
}


class UsageError(Exception):
    pass


def _point(text):
    return float(text)


def _add_run_args(p: argparse.ArgumentParser, with_kappa: bool = True):
    p.add_argument("scalar", nargs="?", help="scalar GVOL volume")
    p.add_argument("--labels", help="label GVOL volume (skips threshold segmentation)")
    p.add_argument("--config", help="JSON config; flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--cardia", nargs=3, type=_point, metavar=("X", "Y", "Z"), help="cardia landmark, mm")
    p.add_argument("--pylorus", nargs=3, type=_point, metavar=("X", "Y", "Z"), help="pylorus landmark, mm")
    p.add_argument("--landmarks-from", help="phantom truth JSON supplying both landmarks")
    p.add_argument("--d", type=int, help="hexahedron edge in voxels")
    if with_kappa:
        p.add_argument("--kappa", type=float, help="termination threshold on the change of D, mm")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--orientation", choices=("backward", "forward"), help="base-line direction rule")
    p.add_argument("--render-mode", choices=RENDER_MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vunfold", description="Virtual unfolding of tube-shaped organ walls.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic tube phantom")
    p.add_argument("--shape", choices=("straight", "j-tube"), default="straight")
    p.add_argument("--radius", type=float, required=True, help="outer radius, mm")
    p.add_argument("--wall", type=float, required=True, help="wall thickness, mm")
    p.add_argument("--length", type=float, required=True, help="axis length, mm")
    p.add_argument("--spacing", nargs=3, type=float, default=(1.0, 1.0, 1.0), metavar=("SX", "SY", "SZ"))
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--prefix", default="phantom")

    p = sub.add_parser("unfold", help="unfold a volume")
    _add_run_args(p)

    p = sub.add_parser("sweep", help="unfold once per kappa and tabulate the results")
    _add_run_args(p, with_kappa=False)
    p.add_argument("--kappas", nargs="*", type=float, required=True)

    p = sub.add_parser("render", help="render an existing unfolded volume")
    p.add_argument("volume")
    p.add_argument("--mask", help="mask GVOL written next to the volume")
    p.add_argument("--out", required=True, help="output PGM image")
    p.add_argument("--center", type=float, default=40.0)
    p.add_argument("--width", type=float, default=400.0)
    p.add_argument("--mode", choices=RENDER_MODES, default="mip")
    return parser


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {key: getattr(args, flag, None) for flag, key in _OVERRIDES.items()}
    if args.landmarks_from:
        try:
            truth = PhantomTruth.load(args.landmarks_from)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read landmarks from {args.landmarks_from}: {exc}") from exc
        overrides["cardia"] = overrides["cardia"] or truth.cardia.tolist()
        overrides["pylorus"] = overrides["pylorus"] or truth.pylorus.tolist()
    for key in ("cardia", "pylorus"):
        if overrides[key] is not None:
            overrides[key] = [float(x) for x in overrides[key]]
    cfg = cfg.updated(**overrides)
    if cfg.scalar is None:
        raise UsageError("a scalar volume is required")
    if cfg.cardia is None:
        raise UsageError("--cardia is required")
    if cfg.pylorus is None:
        raise UsageError("--pylorus is required")
    return cfg


def cmd_phantom(args) -> int:
    spec = PhantomSpec(shape=args.shape, radius=args.radius, wall=args.wall, length=args.length,
                       spacing=tuple(args.spacing))
    scalar, labels, truth = gen_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(scalar, out / f"{args.prefix}_scalar.gvol")
    write_volume(labels, out / f"{args.prefix}_labels.gvol")
    truth.save(out / f"{args.prefix}_truth.json")
    print(f"wrote {args.prefix}_scalar.gvol, {args.prefix}_labels.gvol, {args.prefix}_truth.json to {out}")
    return EXIT_OK


def cmd_unfold(args) -> int:
    cfg = config_from_args(args)
    manifest, code = run_pipeline(cfg)
    if manifest["status"] == "ok":
        print(f"{manifest['stop_reason']} after {manifest['iterations']} iterations, "
              f"D {manifest['d_initial']:.3f} -> {manifest['d_final']:.3f}")
    else:
        print(f"error in stage {manifest['stage']}: {manifest['message']}", file=sys.stderr)
    return code


def cmd_sweep(args) -> int:
    if not args.kappas:
        raise UsageError("--kappas needs at least one value")
    cfg = config_from_args(args)
    rows, code = run_sweep(cfg, args.kappas)
    table = format_sweep(rows)
    out = Path(cfg.output_dir)
    (out / "sweep.txt").write_text(table + "\n")
    (out / "sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    print(table)
    return code


def cmd_render(args) -> int:
    try:
        uv = UnfoldedVolume.load(args.volume, args.mask)
        write_pgm(render_view(uv, args.center, args.width, args.mode), args.out)
    except (OSError, VolumeFormatError, UnfoldError) as exc:
        print(f"error in stage unfolded_view: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "unfold": cmd_unfold, "sweep": cmd_sweep, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"vunfold {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PhantomError as exc:
        print(f"vunfold phantom: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
