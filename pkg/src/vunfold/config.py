"""Flat JSON run configuration carrying every pipeline tunable."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import preprocess, wall_model
from .dynamics import CORRECTORS, DynamicsConfig
from .geometry import ORIENTATIONS
from .unfolded_view import RENDER_MODES

_DYN = DynamicsConfig()


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # inputs and outputs
    scalar: str | None = None
    labels: str | None = None
    output_dir: str = "unfold_out"
    cardia: list | None = None
    pylorus: list | None = None
    # preprocess
    air_threshold: float = preprocess.AIR_THRESHOLD
    wall_threshold: float = preprocess.WALL_THRESHOLD
    wall_shell_mm: float = preprocess.WALL_SHELL_MM
    resample_step_mm: float = preprocess.RESAMPLE_STEP_MM
    slab_half_width_mm: float = preprocess.SLAB_HALF_WIDTH_MM
    ridge_band_mm: float | None = None
    centerline_smoothing: int = 5
    incision_smoothing: int = 3
    # wall model
    d: int = 8
    tiling: str = "cover"
    density: float = wall_model.DENSITY
    edge_stiffness: float = wall_model.EDGE_STIFFNESS
    diagonal_stiffness: float = wall_model.DIAGONAL_STIFFNESS
    damping: float = wall_model.DAMPING
    boundary_radius: float | None = None
    # unfolding geometry
    baseline_orientation: str = "forward"
    # dynamics
    dt: float = _DYN.dt
    beta: float = _DYN.beta
    gamma: float = _DYN.gamma
    corrector: str = _DYN.corrector
    corrector_passes: int = _DYN.corrector_passes
    corrector_tol: float = _DYN.corrector_tol
    pull_gain: float = _DYN.pull_gain
    pull_cap: float = _DYN.pull_cap
    flatten_gain: float = _DYN.flatten_gain
    flatten_ramp: int = _DYN.flatten_ramp
    drag: float = _DYN.drag
    max_iterations: int = _DYN.max_iterations
    kappa: float = _DYN.kappa
    divergence_factor: float = _DYN.divergence_factor
    # unfolded view
    margin_mm: float = 5.0
    output_spacing: list | None = None  # defaults to the source spacing
    window_center: float = 40.0
    window_width: float = 400.0
    render_mode: str = "mip"

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(obj) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(obj)

    def updated(self, **overrides) -> "PipelineConfig":
        obj = self.to_dict()
        obj.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_dict(obj)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def dynamics(self) -> DynamicsConfig:
        names = {f.name for f in fields(DynamicsConfig)}
        return DynamicsConfig(**{k: v for k, v in self.to_dict().items() if k in names})

    def validate(self) -> None:
        problems = []

        def number(name, lo=None, hi=None, strict_lo=False, integer=False, optional=False):
            val = getattr(self, name)
            if val is None and optional:
                return
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
                problems.append(f"{name} must be a finite number")
                return
            if integer and int(val) != val:
                problems.append(f"{name} must be an integer")
            if lo is not None and (val <= lo if strict_lo else val < lo):
                problems.append(f"{name} must be {'>' if strict_lo else '>='} {lo}")
            if hi is not None and val > hi:
                problems.append(f"{name} must be <= {hi}")

        def point(name):
            val = getattr(self, name)
            if val is None:
                return
            ok = isinstance(val, (list, tuple)) and len(val) == 3
            ok = ok and all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)
                            for x in val)
            if not ok:
                problems.append(f"{name} must be three finite numbers")

        def choice(name, options):
            if getattr(self, name) not in options:
                problems.append(f"{name} must be one of {tuple(options)}")

        for name in ("scalar", "labels"):
            if getattr(self, name) is not None and not isinstance(getattr(self, name), str):
                problems.append(f"{name} must be a path string")
        if not isinstance(self.output_dir, str) or not self.output_dir:
            problems.append("output_dir must be a nonempty path string")
        point("cardia")
        point("pylorus")
        number("air_threshold")
        number("wall_threshold")
        if not problems and self.wall_threshold <= self.air_threshold:
            problems.append("wall_threshold must exceed air_threshold")
        number("wall_shell_mm", 0, strict_lo=True)
        number("resample_step_mm", 0, strict_lo=True)
        number("slab_half_width_mm", 0, strict_lo=True)
        number("ridge_band_mm", 0, optional=True)
        number("centerline_smoothing", 0, integer=True)
        number("incision_smoothing", 0, integer=True)
        number("d", 2, integer=True)
        choice("tiling", ("cover", "center"))
        for name in ("density", "edge_stiffness", "diagonal_stiffness"):
            number(name, 0, strict_lo=True)
        number("damping", 0)
        number("boundary_radius", 0, strict_lo=True, optional=True)
        choice("baseline_orientation", ORIENTATIONS)
        choice("corrector", CORRECTORS)
        number("dt", 0, strict_lo=True)
        number("beta", 0, 0.5)
        number("gamma", 0, 1)
        number("corrector_passes", 1, integer=True)
        number("corrector_tol", 0)
        for name in ("pull_gain", "pull_cap", "flatten_gain", "drag"):
            number(name, 0)
        number("flatten_ramp", 1, integer=True)
        number("max_iterations", 1, integer=True)
        number("kappa", 0, strict_lo=True)
        number("divergence_factor", 1, strict_lo=True)
        number("margin_mm", 0)
        if self.output_spacing is not None:
            sp = self.output_spacing
            if not (isinstance(sp, (list, tuple)) and len(sp) == 3
                    and all(isinstance(s, (int, float)) and math.isfinite(s) and s > 0 for s in sp)):
                problems.append("output_spacing must be three positive numbers")
        number("window_center")
        number("window_width", 0, strict_lo=True)
        choice("render_mode", RENDER_MODES)
        if problems:
            raise ConfigError("; ".join(problems))
