"""End-to-end unfolding: preprocess, wall model, geometry, dynamics, unfolded view."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig
from .dynamics import CONVERGED, run_unfold
from .geometry import compute_radii, compute_unfold_geometry
from .preprocess import (
    determine_incision_line,
    extract_air_region,
    extract_centerline,
    extract_wall_region,
)
from .unfolded_view import (
    build_unfolded_grid,
    defect_metrics,
    render_view,
    resample_unfolded,
    sheet_width,
    write_pgm,
)
from .volume import LABEL_AIR, LABEL_WALL, LabelVolume, read_volume
from .wall_model import build_hex_model

log = logging.getLogger(__name__)

STAGES = ("preprocess", "wall_model", "unfold_geometry", "dynamics", "unfolded_view")
EXIT_OK, EXIT_STAGE, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3

OUTPUT_NAMES = {
    "unfolded": "unfolded.gvol",
    "mask": "unfolded_mask.gvol",
    "image": "unfolded.pgm",
    "iteration_log": "iterations.log",
    "manifest": "manifest.json",
}
# manifest keys that legitimately differ between identical runs
VOLATILE_KEYS = ("created", "timings")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Prepared:
    scalar: object
    air: object
    wall: object
    centerline: object
    incision: object
    timings: dict = field(default_factory=dict)


@dataclass
class UnfoldResult:
    prepared: Prepared
    model: object
    geometry: object
    run: object
    unfolded: object
    image: np.ndarray
    metrics: dict
    timings: dict

    @property
    def converged(self) -> bool:
        return self.run.reason == CONVERGED


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name = name
        self.timings = timings

    def __enter__(self):
        log.info("stage %s", self.name)
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = round(time.perf_counter() - self.t0, 6)
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def prepare(scalar, cfg: PipelineConfig, labels=None) -> Prepared:
    """Air and wall regions, centreline and incision line from the inputs."""
    timings = {}
    with _Stage("preprocess", timings):
        if cfg.cardia is None or cfg.pylorus is None:
            raise ValueError("cardia and pylorus landmarks are required")
        cardia = np.asarray(cfg.cardia, dtype=float)
        pylorus = np.asarray(cfg.pylorus, dtype=float)
        if labels is not None:
            if labels.dims != scalar.dims:
                raise ValueError(f"label dims {labels.dims} differ from scalar dims {scalar.dims}")
            air = LabelVolume(np.where(labels.mask(LABEL_AIR), LABEL_AIR, 0), labels.spacing)
            wall = LabelVolume(np.where(labels.mask(LABEL_WALL), LABEL_WALL, 0), labels.spacing)
        else:
            air = extract_air_region(scalar, cardia, cfg.air_threshold)
            wall = extract_wall_region(scalar, air, cfg.wall_shell_mm, cfg.wall_threshold)
        centerline = extract_centerline(air, cardia, pylorus, cfg.resample_step_mm, cfg.centerline_smoothing)
        incision = determine_incision_line(
            wall, air, centerline, cardia, pylorus, cfg.resample_step_mm, cfg.slab_half_width_mm,
            cfg.ridge_band_mm, cfg.incision_smoothing,
        )
    return Prepared(scalar, air, wall, centerline, incision, timings)


def unfold(prepared: Prepared, cfg: PipelineConfig, log_file=None) -> UnfoldResult:
    """Model, geometry, dynamics and resampling on already prepared inputs."""
    timings = dict(prepared.timings)
    with _Stage("wall_model", timings):
        model = build_hex_model(
            prepared.wall, prepared.air, prepared.incision, cfg.d, centerline=prepared.centerline,
            tiling=cfg.tiling, density=cfg.density, edge_stiffness=cfg.edge_stiffness,
            diagonal_stiffness=cfg.diagonal_stiffness, damping=cfg.damping,
            boundary_radius=cfg.boundary_radius,
        )
    with _Stage("unfold_geometry", timings):
        geom = compute_unfold_geometry(model, prepared.centerline, prepared.incision, cfg.baseline_orientation)
    with _Stage("dynamics", timings):
        run = run_unfold(model, geom.destinations, geom.plane, cfg.dynamics(), log_file)
    with _Stage("unfolded_view", timings):
        spacing = cfg.output_spacing or prepared.scalar.spacing
        positions = run.state.positions
        grid = build_unfolded_grid(geom.plane, positions, spacing, cfg.margin_mm, geom.baseline.v1, geom.baseline.v2)
        uv = resample_unfolded(prepared.scalar, model.hexes, model.rest, positions, grid)
        metrics = defect_metrics(uv, geom.plane)
        u = prepared.incision.points
        mid = len(u) // 2 - 1
        eps_mid = float(compute_radii(prepared.centerline, prepared.incision,
                                      vertices=[0], positions=u[mid]).eps[0])
        metrics["sheet_width_mid"] = sheet_width(uv, geom.baseline.points[mid])
        metrics["target_width_mid"] = 2.0 * np.pi * eps_mid
        metrics.update(uv.diagnostics)
        image = render_view(uv.quantized(), cfg.window_center, cfg.window_width, cfg.render_mode)
    return UnfoldResult(prepared, model, geom, run, uv, image, metrics, timings)


def load_inputs(cfg: PipelineConfig):
    if cfg.scalar is None:
        raise StageError("preprocess", ValueError("no scalar volume given"))
    try:
        scalar = read_volume(cfg.scalar)
        labels = read_volume(cfg.labels) if cfg.labels is not None else None
    except (OSError, ValueError) as exc:
        raise StageError("preprocess", exc) from exc
    if not hasattr(scalar, "dtype_code") or scalar.dtype_code != 0:
        raise StageError("preprocess", ValueError(f"{cfg.scalar} is not a scalar volume"))
    if labels is not None and labels.dtype_code != 1:
        raise StageError("preprocess", ValueError(f"{cfg.labels} is not a label volume"))
    return scalar, labels


def _finite(x):
    return x if np.isfinite(x) else None


def build_manifest(cfg: PipelineConfig, inputs: dict, result: UnfoldResult | None, error: StageError | None,
                   outputs: dict, timings: dict) -> dict:
    manifest = {
        "vunfold_version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_dict(),
        "inputs": inputs,
        "timings": timings,
        "outputs": outputs,
    }
    if error is not None:
        manifest.update(status="error", stage=error.stage, message=str(error.cause))
        return manifest
    run = result.run
    model = result.model
    manifest.update(
        status="ok",
        stop_reason=run.reason,
        message=run.message,
        iterations=run.iterations,
        d_initial=run.d_history[0],
        d_final=run.d_history[-1],
        d_history=[_finite(float(d)) for d in run.d_history],
        metrics={k: (_finite(float(v)) if isinstance(v, float) else v) for k, v in result.metrics.items()},
        model={
            "hexahedra": int(len(model.hexes)),
            "vertices": int(model.n_vertices),
            "springs": int(len(model.springs)),
            "s_vo": int(len(model.s_vo)),
            "s_vi": int(len(model.s_vi)),
            "s_vb": int(len(model.s_vb)),
            **model.diagnostics,
        },
        grid=result.unfolded.grid.to_dict(),
    )
    return manifest


def exit_code_for(result: UnfoldResult | None, error: StageError | None) -> int:
    if error is not None:
        return EXIT_STAGE
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def run_pipeline(cfg: PipelineConfig, prepared: Prepared | None = None):
    """Run every stage and write outputs plus the manifest into ``cfg.output_dir``.

    Returns ``(manifest, exit_code)``. Stage failures are reported in the
    manifest rather than raised.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    for key in ("scalar", "labels"):
        path = getattr(cfg, key)
        if path is not None and Path(path).is_file():
            inputs[key] = {"path": path, "sha256": sha256_file(path)}
    result, error, outputs = None, None, {}
    timings = {}
    try:
        if prepared is None:
            scalar, labels = load_inputs(cfg)
            prepared = prepare(scalar, cfg, labels)
        with open(out / OUTPUT_NAMES["iteration_log"], "w") as fh:
            result = unfold(prepared, cfg, fh)
        timings = dict(result.timings)
        with _Stage("write_outputs", timings):
            result.unfolded.save(out / OUTPUT_NAMES["unfolded"], out / OUTPUT_NAMES["mask"])
            write_pgm(result.image, out / OUTPUT_NAMES["image"])
        outputs = {k: OUTPUT_NAMES[k] for k in ("unfolded", "mask", "image", "iteration_log")}
    except StageError as exc:
        error = exc
        log.error("stage %s failed: %s", exc.stage, exc.cause)
        timings = dict(prepared.timings) if prepared is not None else timings
    manifest = build_manifest(cfg, inputs, result, error, outputs, timings)
    (out / OUTPUT_NAMES["manifest"]).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    code = exit_code_for(result, error)
    if error is None:
        log.info("stop reason %s after %d iterations", result.run.reason, result.run.iterations)
    return manifest, code


def stable_manifest(manifest: dict) -> dict:
    """Manifest without the fields that vary between otherwise identical runs."""
    return {k: v for k, v in manifest.items() if k not in VOLATILE_KEYS}


SWEEP_COLUMNS = ("kappa", "iterations", "d_final", "overlap_fraction", "broken_fraction", "bending_rms")


def sweep_row(kappa: float, manifest: dict, code: int) -> dict:
    row = {"kappa": kappa, "exit_code": code, "status": manifest.get("status")}
    if manifest.get("status") == "ok":
        m = manifest["metrics"]
        row.update(
            stop_reason=manifest["stop_reason"],
            iterations=manifest["iterations"],
            d_final=manifest["d_final"],
            overlap_fraction=m["overlap_fraction"],
            broken_fraction=m["broken_fraction"],
            bending_rms=m["bending_rms"],
        )
    else:
        row.update(stage=manifest.get("stage"), message=manifest.get("message"))
    return row


def run_sweep(cfg: PipelineConfig, kappas):
    """One full run per kappa into ``<output_dir>/kappa_<k>``; upstream stages are shared.

    A failing run is recorded and the sweep continues. Returns ``(rows, exit_code)``.
    """
    kappas = list(kappas)
    if not kappas:
        raise ValueError("empty kappa list")
    cfg.validate()
    for k in kappas:
        cfg.updated(kappa=k)  # range-check every kappa before computing
    prepared, prep_error = None, None
    try:
        scalar, labels = load_inputs(cfg)
        prepared = prepare(scalar, cfg, labels)
    except StageError as exc:
        prep_error = exc
    rows = []
    for k in kappas:
        sub = cfg.updated(kappa=k, output_dir=str(Path(cfg.output_dir) / f"kappa_{k:g}"))
        if prep_error is not None:
            Path(sub.output_dir).mkdir(parents=True, exist_ok=True)
            manifest = build_manifest(sub, {}, None, prep_error, {}, {})
            (Path(sub.output_dir) / OUTPUT_NAMES["manifest"]).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
            code = EXIT_STAGE
        else:
            manifest, code = run_pipeline(sub, prepared)
        rows.append(sweep_row(k, manifest, code))
    if any(r["exit_code"] == EXIT_STAGE for r in rows):
        code = EXIT_STAGE
    elif any(r["exit_code"] == EXIT_NOT_CONVERGED for r in rows):
        code = EXIT_NOT_CONVERGED
    else:
        code = EXIT_OK
    return rows, code


def format_sweep(rows) -> str:
    lines = ["kappa  iterations  final_D  overlap  broken  bending_rms  status"]
    for r in rows:
        if r["status"] == "ok":
            lines.append(f"{r['kappa']:<6g} {r['iterations']:>10d}  {r['d_final']:7.3f}  {r['overlap_fraction']:7.4f}"
                         f"  {r['broken_fraction']:6.4f}  {r['bending_rms']:11.3f}  {r['stop_reason']}")
        else:
            lines.append(f"{r['kappa']:<6g} {'-':>10}  {'-':>7}  {'-':>7}  {'-':>6}  {'-':>11}  "
                         f"error in {r['stage']}: {r['message']}")
    return "\n".join(lines)
