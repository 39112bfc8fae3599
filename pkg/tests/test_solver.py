import numpy as np
import pytest

from reachguard.grid import Grid, TimeIndexedValueFunction, ValueFunction, interpolate
from reachguard.hj_solver import (
    CFLViolation,
    HamiltonianSpec,
    NumericFailure,
    SolveConfig,
    cfl_dt,
    lax_friedrichs_step,
    solve_brs_time_varying,
    solve_brs_to_convergence,
    solve_frs,
    zero_hamiltonian,
)

LINE = Grid((-3.0,), (3.0,), (121,))


def drift(speed):
    """Uncontrolled x' = speed: H = p * speed."""
    return HamiltonianSpec(lambda x, p, t: speed * p[0], [abs(speed)])


def spread(speed):
    """Any velocity in [-speed, speed], maximised: H = speed |p|."""
    return HamiltonianSpec(lambda x, p, t: speed * np.abs(p[0]), [speed])


def zero_crossings(v):
    x, d = v.grid.axes[0], v.data
    k = np.flatnonzero(np.sign(d[:-1]) != np.sign(d[1:]))
    return x[k] - d[k] * (x[k + 1] - x[k]) / (d[k + 1] - d[k])


def interval_target(grid, lo, hi):
    (x,) = grid.states()
    return ValueFunction(grid, np.maximum(lo - x, x - lo - (hi - lo)))


def test_backward_advection_moves_boundary_upstream():
    target = TimeIndexedValueFunction.constant(interval_target(LINE, -0.5, 0.5))
    out = solve_brs_time_varying(LINE, target, drift(-1.0), 0.0, 1.0)
    z = zero_crossings(out.frame(0))
    dx = LINE.dx[0]
    assert z.min() == pytest.approx(-0.5, abs=2 * dx)
    assert z.max() == pytest.approx(1.5, abs=2 * dx)


def test_forward_spread_grows_by_speed_times_time():
    init = interval_target(LINE, -0.5, 0.5)
    out = solve_frs(LINE, init, spread(1.0), 0.0, 1.0, output_times=[0.5, 1.0])
    assert np.allclose(out.times, [0.0, 0.5, 1.0])
    z = zero_crossings(out.frame(2))
    assert np.allclose(sorted(z), [-1.5, 1.5], atol=2 * LINE.dx[0])


def test_zero_hamiltonian_keeps_constant_field():
    g = Grid((0.0, 0.0), (1.0, 1.0), (11, 11))
    v = ValueFunction(g, np.full(g.shape, 2.0))
    out = lax_friedrichs_step(v, zero_hamiltonian(2), 0.0, 0.01)
    assert np.array_equal(out.data, v.data)


def test_cfl_violation_raises():
    v = interval_target(LINE, -0.5, 0.5)
    ham = drift(-1.0)
    dt = cfl_dt(LINE, ham.alpha_for(LINE), 0.5)
    lax_friedrichs_step(v, ham, 0.0, dt)
    with pytest.raises(CFLViolation):
        lax_friedrichs_step(v, ham, 0.0, 2 * dt)


def test_freeze_keeps_frames_below_target_and_nested():
    l = interval_target(LINE, -0.5, 0.5)
    out = solve_brs_time_varying(LINE, TimeIndexedValueFunction.constant(l), spread(1.0), 0.0, 2.0, output_times=[0.0, 0.5, 1.0, 1.5])
    assert np.all(out.data <= l.data + 1e-12)
    # earlier frames have had longer to reach the target: they are contained in later ones' complements
    assert np.all(np.diff(out.data, axis=0) >= -1e-12)


def test_time_varying_target_uses_frame_at_or_after():
    (x,) = LINE.states()
    frames = np.stack([np.full(LINE.shape, 5.0), x - 2.0])
    target = TimeIndexedValueFunction(LINE, np.array([0.0, 1.0]), frames)
    out = solve_brs_time_varying(LINE, target, zero_hamiltonian(1), 0.0, 1.0, output_times=[0.5])
    # between frames the later (time 1) target applies, so x >= 2 is held in the set
    assert interpolate(out.at(0.5), [2.5]) <= 0.5 + 1e-9


def test_non_finite_hamiltonian_is_a_numeric_failure():
    bad = HamiltonianSpec(lambda x, p, t: np.full_like(p[0], np.nan), [1.0])
    with pytest.raises(NumericFailure) as err:
        solve_frs(LINE, interval_target(LINE, -0.5, 0.5), bad, 0.0, 0.1)
    assert err.value.step == 1


def test_convergence_flag():
    l = interval_target(LINE, -0.5, 0.5)
    # a maximising spread only pushes values up, so the freeze holds the target at once
    res = solve_brs_to_convergence(LINE, l, spread(1.0), SolveConfig(convergence_tol=1e-6))
    assert res.converged and np.allclose(res.value.data, l.data)
    # a minimising one keeps lowering values at unit rate
    grow = HamiltonianSpec(lambda x, p, t: -np.abs(p[0]), [1.0])
    short = solve_brs_to_convergence(LINE, l, grow, SolveConfig(max_steps=5))
    assert not short.converged and short.steps == 5
    assert short.residual == pytest.approx(1.0, rel=0.05)


def test_solve_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(cfl=1.5)
    with pytest.raises(ValueError):
        SolveConfig(dissipation_bounds=(0.0,))


def test_grid_mismatch_rejected():
    other = Grid((-1.0,), (1.0,), (11,))
    with pytest.raises(ValueError):
        solve_frs(LINE, interval_target(other, -0.5, 0.5), spread(1.0), 0.0, 1.0)
