"""Newmark-beta deformation of the wall model under unfolding forces.

Units: lengths in mm, masses in kg, time in s, forces in kg*mm/s^2, so
acceleration is simply force / mass.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
DIVERGED = "diverged"
STOP_REASONS = (CONVERGED, MAX_ITERATIONS, DIVERGED)
CORRECTORS = ("newton", "fixed-point")


class DivergenceError(RuntimeError):
    def __init__(self, alpha: int, vertex: int):
        super().__init__(f"divergence at iteration {alpha}: vertex {vertex} is non-finite")
        self.alpha = alpha
        self.vertex = vertex


@dataclass
class DynamicsConfig:
    dt: float = 0.005
    beta: float = 0.25
    gamma: float = 0.5
    corrector_passes: int = 20
    corrector_tol: float = 1e-6
    pull_gain: float = 40.0
    pull_cap: float = 400.0
    flatten_gain: float = 10.0
    flatten_ramp: int = 10
    drag: float = 0.1
    corrector: str = "newton"
    max_iterations: int = 5000
    kappa: float = 0.5
    divergence_factor: float = 10.0

    def validate(self) -> None:
        problems = []
        if not (self.dt > 0 and math.isfinite(self.dt)):
            problems.append("dt must be > 0")
        if not 0.0 <= self.beta <= 0.5:
            problems.append("beta must lie in [0, 1/2]")
        if not 0.0 <= self.gamma <= 1.0:
            problems.append("gamma must lie in [0, 1]")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            problems.append("kappa must be > 0")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            problems.append("max_iterations must be an integer >= 1")
        if int(self.corrector_passes) != self.corrector_passes or self.corrector_passes < 1:
            problems.append("corrector_passes must be an integer >= 1")
        if not self.corrector_tol >= 0:
            problems.append("corrector_tol must be >= 0")
        if int(self.flatten_ramp) != self.flatten_ramp or self.flatten_ramp < 1:
            problems.append("flatten_ramp must be an integer >= 1")
        for name in ("pull_gain", "pull_cap", "flatten_gain", "drag"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        if self.corrector not in CORRECTORS:
            problems.append(f"corrector must be one of {CORRECTORS}")
        if not self.divergence_factor > 1:
            problems.append("divergence_factor must be > 1")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimState:
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    alpha: int = 0
    d_history: list = field(default_factory=list)

    @classmethod
    def at_rest(cls, positions) -> "SimState":
        r = np.array(positions, dtype=float)
        return cls(r, np.zeros_like(r), np.zeros_like(r), 0, [])

    def copy(self) -> "SimState":
        return SimState(self.positions.copy(), self.velocities.copy(), self.accelerations.copy(),
                        self.alpha, list(self.d_history))


def spring_forces(springs, rest_length, stiffness, damping, positions, velocities):
    """Per-vertex spring + damper force and the number of degenerate springs."""
    i, j = springs[:, 0], springs[:, 1]
    delta = positions[i] - positions[j]
    length = np.linalg.norm(delta, axis=1)
    ok = length >= 1e-9
    unit = np.zeros_like(delta)
    unit[ok] = delta[ok] / length[ok, None]
    rel_v = np.einsum("ij,ij->i", velocities[i] - velocities[j], unit)
    mag = -stiffness * (length - rest_length) - damping * rel_v
    mag = np.where(ok, mag, 0.0)
    f = mag[:, None] * unit
    out = np.zeros_like(positions)
    np.add.at(out, i, f)
    np.add.at(out, j, -f)
    return out, int(np.count_nonzero(~ok))


def internal_forces(model, state_or_positions, velocities=None) -> np.ndarray:
    if velocities is None:
        positions, velocities = state_or_positions.positions, state_or_positions.velocities
    else:
        positions = state_or_positions
    forces, degenerate = spring_forces(
        model.springs, model.rest_length, model.stiffness, model.damping, positions, velocities
    )
    if degenerate:
        log.debug("%d springs with coincident endpoints contribute no force", degenerate)
    return forces


def flatten_gain(cfg: DynamicsConfig, alpha: int) -> float:
    return cfg.flatten_gain * min(alpha / cfg.flatten_ramp, 1.0)


def external_forces(positions, dest, plane, cfg: DynamicsConfig, alpha: int, surface=None) -> np.ndarray:
    """Capped pull towards the destinations plus a ramped pull onto the plane."""
    positions = np.asarray(positions, dtype=float)
    out = np.zeros_like(positions)
    e = dest.points - positions[dest.vertices]
    pull = cfg.pull_gain * e
    mag = np.linalg.norm(pull, axis=1)
    scale = np.where(mag > cfg.pull_cap, cfg.pull_cap / np.where(mag > 0, mag, 1.0), 1.0)
    np.add.at(out, dest.vertices, pull * scale[:, None])
    kf = flatten_gain(cfg, alpha)
    if kf > 0 and surface is not None and len(surface):
        h = (positions[surface] - plane.point) @ plane.normal
        np.add.at(out, surface, -kf * h[:, None] * plane.normal[None, :])
    return out


class BlockPattern:
    """CSR layout of (3n, 3n) matrices assembled from spring and per-vertex 3x3 blocks.

    The layout depends only on the spring list, so it is computed once per
    model and every later assembly is a single weighted bincount.
    """

    def __init__(self, springs, n_vertices: int):
        springs = np.asarray(springs, dtype=np.int64).reshape(-1, 2)
        i, j = springs[:, 0], springs[:, 1]
        v = np.arange(n_vertices)
        block_rows = np.concatenate([i, j, i, j, v])
        block_cols = np.concatenate([i, j, j, i, v])
        r3 = np.arange(3)
        n = 3 * n_vertices
        rows = (3 * block_rows)[:, None, None] + r3[None, :, None]
        cols = (3 * block_cols)[:, None, None] + r3[None, None, :]
        keys = (rows * n + cols).ravel()
        uniq, self._inverse = np.unique(keys, return_inverse=True)
        self.n = n
        self.n_springs = len(springs)
        self._indices = (uniq % n).astype(np.int64)
        self._indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int64)

    def matrix(self, spring_blocks, vertex_blocks) -> sp.csr_matrix:
        """Sum of +block at (i,i), (j,j), -block at (i,j), (j,i) per spring plus vertex blocks."""
        sb = np.asarray(spring_blocks, dtype=float)
        vals = np.concatenate([sb, sb, -sb, -sb, np.asarray(vertex_blocks, dtype=float)]).ravel()
        data = np.bincount(self._inverse, weights=vals, minlength=len(self._indices))
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n, self.n))


def spring_tangent_blocks(springs, rest_length, stiffness, damping, positions):
    """Per-spring 3x3 stiffness and damping blocks (negated force Jacobians).

    The geometric stiffness term is clamped at zero for compressed springs so
    the assembled stiffness stays positive semi-definite.
    """
    i, j = springs[:, 0], springs[:, 1]
    delta = positions[i] - positions[j]
    length = np.linalg.norm(delta, axis=1)
    ok = length >= 1e-9
    unit = np.zeros_like(delta)
    unit[ok] = delta[ok] / length[ok, None]
    outer = unit[:, :, None] * unit[:, None, :]
    geo = np.clip(1.0 - rest_length / np.where(ok, length, 1.0), 0.0, None)
    kb = stiffness[:, None, None] * (outer + geo[:, None, None] * (np.eye(3)[None] - outer))
    cb = damping[:, None, None] * outer
    kb[~ok] = 0.0
    cb[~ok] = 0.0
    return kb, cb


def external_tangent_blocks(positions, dest, plane, cfg, alpha: int, surface=None):
    """Per-vertex 3x3 stiffness of the pull and flattening forces and damping of the drag."""
    n = len(positions)
    kv = np.zeros((n, 3, 3))
    if dest is not None and len(dest.vertices):
        e = dest.points - positions[dest.vertices]
        mag = cfg.pull_gain * np.linalg.norm(e, axis=1)
        scale = np.where(mag > cfg.pull_cap, cfg.pull_cap / np.where(mag > 0, mag, 1.0), 1.0)
        np.add.at(kv, np.asarray(dest.vertices), (cfg.pull_gain * scale)[:, None, None] * np.eye(3)[None])
        kf = flatten_gain(cfg, alpha)
        if kf > 0 and surface is not None and len(surface):
            np.add.at(kv, np.asarray(surface), kf * np.outer(plane.normal, plane.normal)[None])
    cv = np.broadcast_to(float(cfg.drag) * np.eye(3), (n, 3, 3))
    return kv, cv


DENSE_DOFS = 300  # below this many unknowns a dense solve beats sparse setup


def _solve_shifted(system, shift, rhs, free):
    """Solve ``(system + diag(shift)) x = rhs`` on the ``free`` unknowns; the rest stay 0."""
    out = np.zeros(rhs.shape)
    if len(rhs) <= DENSE_DOFS:
        dense = system.toarray() if sp.issparse(system) else np.array(system, dtype=float)
        dense.flat[:: len(rhs) + 1] += shift
        if free.all():
            return np.linalg.solve(dense, rhs)
        out[free] = np.linalg.solve(dense[np.ix_(free, free)], rhs[free])
        return out
    mat = (sp.csr_matrix(system) + sp.diags(shift)).tocsr()
    if not free.all():
        mat = mat[free][:, free]
    out[free] = spsolve(mat.tocsc(), rhs[free])
    return out


def newmark_update(r, v, a, mass, force_fn, dt, beta, gamma, passes=3, tangent_fn=None, tol=0.0):
    """One Newmark-beta step.

    Without ``tangent_fn`` each of the ``passes`` corrector passes is the
    plain fixed point a = F(r^, v^) / m. With it, ``tangent_fn(r, v, kc, cc)``
    returns the sparse matrix ``kc * K + cc * C`` of the negated force
    Jacobians (stiffness K, damping C) and each pass is a Newton update of the
    same equation, which stays convergent for stiff springs. Newton passes
    stop early once the residual, or the update, is below ``tol`` relative to
    the inertial force, or to the acceleration.
    Infinite masses pin vertices in place.
    """
    r_pred = r + dt * v + dt * dt * (0.5 - beta) * a
    v_pred = v + dt * (1.0 - gamma) * a
    m = np.asarray(mass, dtype=float)
    pinned = ~np.isfinite(m)
    m_safe = np.where(pinned, 1.0, m)
    free = np.repeat(~pinned, 3)
    a_new = np.array(a, dtype=float)
    a_new[pinned] = 0.0
    for _ in range(max(int(passes), 1)):
        r_hat = r_pred + dt * dt * beta * a_new
        v_hat = v_pred + dt * gamma * a_new
        f = force_fn(r_hat, v_hat)
        if tangent_fn is None:
            a_new = f / m_safe[:, None]
        else:
            residual = (f - m_safe[:, None] * a_new).ravel()
            inertia = np.linalg.norm(m_safe[:, None] * a_new)
            if np.linalg.norm(residual[free]) <= tol * inertia:
                break
            system = tangent_fn(r_hat, v_hat, dt * dt * beta, dt * gamma)
            delta = _solve_shifted(system, np.repeat(m_safe, 3), residual, free)
            a_new = a_new + delta.reshape(-1, 3)
            a_new[pinned] = 0.0
            if np.linalg.norm(delta) <= tol * max(np.linalg.norm(a_new), 1e-300):
                break
        a_new[pinned] = 0.0
    r_new = r_pred + dt * dt * beta * a_new
    v_new = v_pred + dt * gamma * a_new
    r_new[pinned] = r[pinned]
    v_new[pinned] = 0.0
    return r_new, v_new, a_new


def newmark_step(model, state: SimState, cfg: DynamicsConfig, dest=None, plane=None, surface=None) -> SimState:
    """Advance one iteration; external forces are applied when ``dest`` is given."""
    alpha = state.alpha + 1

    def forces(r, v):
        f, _ = spring_forces(model.springs, model.rest_length, model.stiffness, model.damping, r, v)
        if dest is not None:
            f = f + external_forces(r, dest, plane, cfg, alpha, surface)
        if cfg.drag:
            f = f - cfg.drag * v
        return f

    tangent = None
    if cfg.corrector == "newton":
        pattern = model.cache.get("block_pattern")
        if pattern is None or pattern.n_springs != len(model.springs):
            pattern = model.cache["block_pattern"] = BlockPattern(model.springs, model.n_vertices)

        def tangent(r, v, kc, cc):
            kb, cb = spring_tangent_blocks(model.springs, model.rest_length, model.stiffness, model.damping, r)
            kv, cv = external_tangent_blocks(r, dest, plane, cfg, alpha, surface)
            return pattern.matrix(kc * kb + cc * cb, kc * kv + cc * cv)

    r, v, a = newmark_update(state.positions, state.velocities, state.accelerations, model.mass,
                             forces, cfg.dt, cfg.beta, cfg.gamma, cfg.corrector_passes, tangent,
                             cfg.corrector_tol)
    bad = ~(np.all(np.isfinite(r), axis=1) & np.all(np.isfinite(v), axis=1))
    if bad.any():
        raise DivergenceError(alpha, int(np.nonzero(bad)[0][0]))
    return SimState(r, v, a, alpha, list(state.d_history))


def unfold_metric(positions, dest) -> float:
    """Mean distance of the cut-edge vertices to their destinations."""
    if len(dest.vertices) == 0:
        raise ValueError("S_vb is empty")
    diff = np.asarray(positions, dtype=float)[dest.vertices] - dest.points
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def is_converged(d_prev: float, d_curr: float, kappa: float) -> bool:
    return abs(d_prev - d_curr) <= kappa


def first_converged(history, kappa: float):
    """Iteration index at which a D-history first meets the stopping rule, or None."""
    for alpha in range(1, len(history)):
        if is_converged(history[alpha - 1], history[alpha], kappa):
            return alpha
    return None


def mechanical_energy(model, positions, velocities) -> float:
    i, j = model.springs[:, 0], model.springs[:, 1]
    stretch = np.linalg.norm(positions[i] - positions[j], axis=1) - model.rest_length
    kinetic = 0.5 * float(np.sum(model.mass[:, None] * velocities**2))
    return kinetic + 0.5 * float(np.sum(model.stiffness * stretch**2))


@dataclass
class UnfoldRun:
    state: SimState
    reason: str
    d_history: list
    max_force: list
    message: str = ""

    @property
    def iterations(self) -> int:
        return self.state.alpha


def run_unfold(model, dest, plane, cfg: DynamicsConfig, log_file=None) -> UnfoldRun:
    """Iterate Newmark steps until the change of D drops to kappa or below.

    ``log_file`` (an open text file) receives one ``alpha D maxForce`` line per iteration.
    """
    cfg.validate()
    surface = model.surface_vertices()
    state = SimState.at_rest(model.rest)
    d0 = unfold_metric(state.positions, dest)
    state.d_history = [d0]
    max_force = [0.0]
    if log_file is not None:
        log_file.write(f"0 {d0:.9f} 0\n")
    reason, message = MAX_ITERATIONS, ""
    while state.alpha < cfg.max_iterations:
        try:
            new = newmark_step(model, state, cfg, dest, plane, surface)
        except DivergenceError as exc:
            reason, message = DIVERGED, str(exc)
            break
        d = unfold_metric(new.positions, dest)
        f_ext = external_forces(new.positions, dest, plane, cfg, new.alpha, surface)
        fmax = float(np.max(np.linalg.norm(f_ext, axis=1))) if len(f_ext) else 0.0
        new.d_history.append(d)
        max_force.append(fmax)
        state = new
        if log_file is not None:
            log_file.write(f"{state.alpha} {d:.9f} {fmax:.9g}\n")
        if not math.isfinite(d) or d > cfg.divergence_factor * max(d0, 1e-12):
            reason, message = DIVERGED, f"D excursion {d:.3f} at iteration {state.alpha}"
            break
        if is_converged(state.d_history[-2], d, cfg.kappa):
            reason = CONVERGED
            break
    return UnfoldRun(state, reason, state.d_history, max_force, message)
