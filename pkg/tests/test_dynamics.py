import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vunfold.dynamics import (
    CONVERGED,
    DIVERGED,
    MAX_ITERATIONS,
    STOP_REASONS,
    DynamicsConfig,
    SimState,
    external_forces,
    first_converged,
    flatten_gain,
    internal_forces,
    is_converged,
    newmark_step,
    newmark_update,
    run_unfold,
    spring_forces,
    unfold_metric,
)
from vunfold.geometry import DestinationSet, UnfoldPlane
from vunfold.wall_model import model_from_cells


def oscillate(corrector, periods=10, dt=0.01):
    """Unit mass on a unit spring anchored at the origin, x(0) = 1."""
    springs = np.array([[0, 1]])
    mass = np.array([np.inf, 1.0])
    r = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    # rest length 0 along x: the anchor sits at the origin and the spring is linear
    r[1, 0] = 1.0

    def force(pos, vel):
        f = np.zeros_like(pos)
        f[1] = -(pos[1] - pos[0])
        return f

    def tangent(pos, vel, kc, cc):
        k = np.zeros((6, 6))
        k[3:, 3:] = kc * np.eye(3)
        return k

    v = np.zeros_like(r)
    a = force(r, v) / np.where(np.isfinite(mass), mass, 1.0)[:, None]
    a[0] = 0.0
    n = int(round(periods * 2 * math.pi / dt))
    xs = [r[1, 0]]
    for _ in range(n):
        r, v, a = newmark_update(r, v, a, mass, force, dt, 0.25, 0.5, passes=3,
                                 tangent_fn=tangent if corrector == "newton" else None, tol=1e-12)
        xs.append(r[1, 0])
    return np.arange(n + 1) * dt, np.array(xs)


def amplitude_phase(t, x, window):
    """Least-squares fit x = A cos(t + phi) over the trailing ``window`` seconds."""
    sel = t >= t[-1] - window
    basis = np.stack([np.cos(t[sel]), -np.sin(t[sel])], axis=1)
    (p, q), *_ = np.linalg.lstsq(basis, x[sel], rcond=None)
    return math.hypot(p, q), math.atan2(q, p)


@pytest.mark.parametrize("corrector", ["newton", "fixed-point"])
def test_harmonic_oscillator(corrector):
    t, x = oscillate(corrector)
    amp, phase = amplitude_phase(t, x, 2 * math.pi)
    assert abs(amp - 1.0) <= 1e-3
    assert abs(phase) <= 1e-3
    assert np.max(np.abs(x - np.cos(t))) <= 2e-3


def test_force_free_uniform_motion():
    r0 = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 2.0]])
    v0 = np.array([[0.5, -1.0, 2.0], [3.0, 0.0, -0.25]])
    r, v, a = r0, v0, np.zeros_like(r0)
    dt = 0.01
    for alpha in range(1, 101):
        r, v, a = newmark_update(r, v, a, np.ones(2), lambda p, q: np.zeros_like(p), dt, 0.25, 0.5)
        assert np.allclose(r, r0 + alpha * dt * v0, rtol=0, atol=1e-12)
    assert np.array_equal(v, v0)


def test_zero_beta_gamma_is_explicit():
    r = np.array([[0.3, 0.0, 0.0]])
    v = np.array([[1.0, 0.0, 0.0]])
    a = np.array([[-2.0, 0.0, 0.0]])
    dt = 0.1
    for passes in (1, 3, 7):
        rn, vn, _ = newmark_update(r, v, a, np.ones(1), lambda p, q: -7.0 * p, dt, 0.0, 0.0, passes)
        assert np.allclose(rn, r + dt * v + 0.5 * dt * dt * a, atol=1e-15)
        assert np.allclose(vn, v + dt * a, atol=1e-15)


def test_hooke_single_spring():
    pos = np.array([[0.0, 0, 0], [1.5, 0, 0]])
    f, bad = spring_forces(np.array([[0, 1]]), np.array([1.0]), np.array([2.0]), np.array([0.0]),
                           pos, np.zeros_like(pos))
    assert bad == 0
    assert np.allclose(f, [[1.0, 0, 0], [-1.0, 0, 0]])


def test_damper_opposes_relative_velocity():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    vel = np.array([[0.0, 0, 0], [2.0, 1.0, 0]])
    f, _ = spring_forces(np.array([[0, 1]]), np.array([1.0]), np.array([0.0]), np.array([0.5]), pos, vel)
    assert np.allclose(f, [[1.0, 0, 0], [-1.0, 0, 0]])


def test_coincident_endpoints_give_no_force():
    pos = np.zeros((2, 3))
    f, bad = spring_forces(np.array([[0, 1]]), np.array([1.0]), np.array([5.0]), np.array([1.0]),
                           pos, np.ones_like(pos))
    assert bad == 1 and np.all(f == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_momentum_conservation(seed, n_cells):
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, 4, size=(n_cells, 3))
    m = model_from_cells(cells, d=2, spacing=(0.8, 0.8, 1.5))
    r = m.rest + rng.normal(0, 0.5, m.rest.shape)
    v = rng.normal(0, 10, m.rest.shape)
    f = internal_forces(m, r, v)
    assert np.max(np.abs(f.sum(axis=0))) <= 1e-9


def toy_problem(shift=(0.0, 6.0, 0.0)):
    """A strip of four cells whose first-row vertices are pulled sideways."""
    m = model_from_cells([(a, 1, 1) for a in range(4)], d=2)
    s_vb = np.nonzero(m.vertex_lattice[:, 1] == 1)[0]
    m.s_vb = s_vb
    m.s_vo = np.arange(m.n_vertices)
    m.s_vi = np.zeros(0, dtype=np.int64)
    g = m.rest[s_vb] + np.asarray(shift)
    g[:, 2] = m.rest[0, 2]  # destinations lie on the plane
    n = len(s_vb)
    dest = DestinationSet(s_vb, np.ones(n), np.zeros(n, int), np.zeros(n, int), np.ones(n, int), g)
    plane = UnfoldPlane(np.array([0.0, 0, 1]), m.rest[0].copy(), m.rest[0].copy(), 0)
    return m, dest, plane


def test_external_forces_fixed_points():
    m, dest, plane = toy_problem()
    cfg = DynamicsConfig()
    pos = m.rest.copy()
    pos[dest.vertices] = dest.points
    pos[:, 2] = plane.point[2]
    assert np.all(external_forces(pos, dest, plane, cfg, 5, m.surface_vertices()) == 0)
    lifted = pos + (0, 0, 3.0)
    f0 = external_forces(lifted, dest, plane, cfg, 0, m.surface_vertices())
    assert np.allclose(f0[dest.vertices], -cfg.pull_gain * np.array([0, 0, 3.0]))
    f = external_forces(lifted, dest, plane, cfg, cfg.flatten_ramp, m.surface_vertices())
    others = np.setdiff1d(np.arange(m.n_vertices), dest.vertices)
    assert np.allclose(f[others], [0, 0, -3.0 * cfg.flatten_gain])


def test_pull_force_is_capped():
    m, dest, plane = toy_problem(shift=(0, 1000.0, 0))
    cfg = DynamicsConfig(flatten_gain=0.0)
    f = external_forces(m.rest, dest, plane, cfg, 1)
    assert np.allclose(np.linalg.norm(f[dest.vertices], axis=1), cfg.pull_cap)


def test_flatten_ramp():
    cfg = DynamicsConfig(flatten_gain=8.0, flatten_ramp=4)
    assert [flatten_gain(cfg, a) for a in (0, 1, 2, 4, 9)] == [0.0, 2.0, 4.0, 8.0, 8.0]


def test_unfold_metric():
    dest = DestinationSet(np.array([0, 1]), np.ones(2), np.zeros(2, int), np.zeros(2, int), np.ones(2, int),
                          np.zeros((2, 3)))
    pos = np.array([[3.0, 0, 0], [0, 0, 5.0], [99, 99, 99]])
    assert unfold_metric(pos, dest) == 4.0
    swapped = DestinationSet(np.array([1, 0]), dest.eps, dest.j, dest.k, dest.side, dest.points[::-1])
    assert unfold_metric(pos, swapped) == 4.0
    pos[:2] = 0.0
    assert unfold_metric(pos, dest) == 0.0
    empty = DestinationSet(np.zeros(0, int), np.zeros(0), np.zeros(0, int), np.zeros(0, int),
                           np.zeros(0, int), np.zeros((0, 3)))
    with pytest.raises(ValueError, match="S_vb"):
        unfold_metric(pos, empty)


def test_stopping_rule():
    assert first_converged([10.0, 9.4, 9.0], 0.5) == 2
    assert first_converged([10.0, 9.4], 0.5) is None
    assert is_converged(9.4, 9.0, 0.5) and not is_converged(10.0, 9.4, 0.5)
    assert is_converged(1.0, 1.5, 0.5)


def test_run_unfold_converges_and_logs():
    m, dest, plane = toy_problem()
    log = io.StringIO()
    run = run_unfold(m, dest, plane, DynamicsConfig(), log_file=log)
    assert run.reason == CONVERGED
    assert len(run.d_history) == run.iterations + 1
    assert run.d_history[-1] < run.d_history[0]
    assert first_converged(run.d_history, 0.5) == run.iterations
    lines = log.getvalue().splitlines()
    assert len(lines) == run.iterations + 1
    assert [int(ln.split()[0]) for ln in lines] == list(range(run.iterations + 1))
    assert float(lines[-1].split()[1]) == pytest.approx(run.d_history[-1], abs=1e-8)


def test_run_unfold_max_iterations():
    m, dest, plane = toy_problem()
    run = run_unfold(m, dest, plane, DynamicsConfig(max_iterations=2, kappa=1e-9))
    assert run.reason == MAX_ITERATIONS and run.iterations == 2


def test_run_unfold_divergence_guard():
    m, dest, plane = toy_problem()
    cfg = DynamicsConfig(corrector="fixed-point", corrector_passes=3, dt=0.5, kappa=1e-9, max_iterations=50)
    run = run_unfold(m, dest, plane, cfg)
    assert run.reason == DIVERGED and run.message


def test_run_unfold_deterministic():
    m, dest, plane = toy_problem()
    a = run_unfold(m, dest, plane, DynamicsConfig(kappa=0.05))
    b = run_unfold(m, dest, plane, DynamicsConfig(kappa=0.05))
    assert a.d_history == b.d_history
    assert np.array_equal(a.state.positions, b.state.positions)


@pytest.mark.parametrize("kappa", [0.05, 0.5, 5.0])
def test_run_unfold_terminates(kappa):
    m, dest, plane = toy_problem()
    run = run_unfold(m, dest, plane, DynamicsConfig(kappa=kappa, max_iterations=400))
    assert run.reason in STOP_REASONS
    assert run.iterations <= 400


def test_step_counter_and_state():
    m, dest, plane = toy_problem()
    s = SimState.at_rest(m.rest)
    s1 = newmark_step(m, s, DynamicsConfig(), dest, plane)
    assert s1.alpha == 1 and s.alpha == 0
    assert s1.positions.shape == m.rest.shape


@pytest.mark.parametrize(
    "kw, message",
    [({"dt": 0}, "dt"), ({"beta": 0.6}, "beta"), ({"gamma": -0.1}, "gamma"), ({"kappa": 0}, "kappa"),
     ({"max_iterations": 0}, "max_iterations"), ({"corrector": "euler"}, "corrector"),
     ({"divergence_factor": 1}, "divergence_factor"), ({"pull_cap": -1}, "pull_cap")],
)
def test_config_validation(kw, message):
    with pytest.raises(ValueError, match=message):
        DynamicsConfig(**kw).validate()
