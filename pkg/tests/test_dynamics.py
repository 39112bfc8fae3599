import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachguard import dynamics as dyn
from reachguard.dynamics import Control, DubinsParams, DubinsState

P = DubinsParams(1.0, 1.0)
CORNERS = (-1.0, 0.0, 1.0)

state = st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(-np.pi, np.pi))
costate = st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))


def oracle(r, lam, p, inner, outer):
    """outer over w_i of inner over w_j of lam . f, by enumerating turn rates."""
    ws = [p.max_turn * c for c in CORNERS]
    return outer(inner(float(np.dot(lam, dyn.relative_flow(r, wi, wj, p))) for wj in ws) for wi in ws)


@settings(max_examples=200, deadline=None)
@given(r=state, lam=costate)
def test_pairwise_hamiltonians_match_enumeration(r, lam):
    assert dyn.ham_pc(r, lam, P) == pytest.approx(oracle(r, lam, P, min, max), abs=1e-9)
    cooperative = min(min(float(np.dot(lam, dyn.relative_flow(r, wi, wj, P))) for wj in CORNERS) for wi in CORNERS)
    assert dyn.ham_exit(r, lam, P) == pytest.approx(cooperative, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(s=state, lam=costate)
def test_single_vehicle_hamiltonian(s, lam):
    best = max(float(np.dot(lam, dyn.dubins_flow(s, w, P))) for w in CORNERS)
    assert dyn.ham_frs_dubins(s, lam, P) == pytest.approx(best, abs=1e-9)
    u = dyn.opt_control_free(s, lam, P)
    assert float(np.dot(lam, dyn.dubins_flow(s, u, P))) == pytest.approx(best, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(r=state, lam=costate)
def test_pc_control_attains_hamiltonian(r, lam):
    u = dyn.opt_control_pc(r, lam, P)
    worst = min(float(np.dot(lam, dyn.relative_flow(r, u, wj, P))) for wj in CORNERS)
    assert worst == pytest.approx(float(dyn.ham_pc(r, lam, P)), abs=1e-9)


def test_hamiltonians_broadcast():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(3, 5, 4))
    lam = rng.normal(size=(3, 5, 4))
    h = dyn.ham_pc(r, lam, P)
    assert h.shape == (5, 4)
    assert h[2, 1] == pytest.approx(dyn.ham_pc(r[:, 2, 1], lam[:, 2, 1], P))


@settings(max_examples=50, deadline=None)
@given(xi=state, xj=state, wi=st.sampled_from(CORNERS), wj=st.sampled_from(CORNERS))
def test_relative_flow_matches_absolute_motion(xi, xj, wi, wj):
    h = 1e-6
    r0 = np.array(dyn.relative_state_of(xi, xj))
    ai = np.array(xi) + h * dyn.dubins_flow(xi, wi, P)
    aj = np.array(xj) + h * dyn.dubins_flow(xj, wj, P)
    r1 = np.array(dyn.relative_state_of(ai, aj))
    r1[2] = r0[2] + dyn.wrap_angle(r1[2] - r0[2])
    assert np.allclose((r1 - r0) / h, dyn.relative_flow(r0, wi, wj, P), atol=1e-4)


def test_relative_state_body_frame():
    r = dyn.relative_state_of((0.0, 0.0, np.pi / 2), (0.0, 2.0, np.pi))
    assert np.allclose(r, (2.0, 0.0, np.pi / 2))
    xi = np.array([[1.0, 2.0, 0.3], [0.0, 0.0, -1.0]])
    xj = np.array([[4.0, -1.0, 2.0], [1.0, 1.0, 3.0]])
    assert np.allclose(dyn.relative_states(xi, xj)[1], dyn.relative_state_of(xi[1], xj[1]))


def test_step_dubins_straight_and_arc():
    s = DubinsState.make(0.0, 0.0, 0.0)
    assert np.allclose(dyn.step_dubins(s, 0.0, 0.5, P), (0.5, 0.0, 0.0))
    x = s
    for _ in range(314):
        x = dyn.step_dubins(x, 1.0, np.pi / 314, P)
    assert np.allclose(x[:2], (0.0, 2.0), atol=1e-4)  # half a unit-radius circle


def test_control_bounds_enforced():
    with pytest.raises(ValueError):
        dyn.dubins_flow((0, 0, 0), Control(1.5), P)
    with pytest.raises(ValueError):
        dyn.step_dubins((0, 0, 0), -2.0, 0.1, P)
    with pytest.raises(ValueError):
        DubinsParams(speed=0.0)


def test_alpha_bounds_cover_hamiltonian_slopes():
    from reachguard.grid import Grid

    g = Grid((-5, -5, -np.pi), (5, 5, np.pi), (11, 11, 8), (False, False, True))
    a = dyn.pc_alpha(g, P)
    rng = np.random.default_rng(3)
    pts = g.states()
    for _ in range(20):
        lam = rng.normal(size=3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-6
            lam_b = tuple(np.full(g.shape, c) for c in lam + e)
            lam_a = tuple(np.full(g.shape, c) for c in lam)
            slope = np.abs(dyn.ham_pc(pts, lam_b, P) - dyn.ham_pc(pts, lam_a, P)) / 1e-6
            assert np.all(slope <= np.broadcast_to(a[k], g.shape) + 1e-4)


@pytest.mark.parametrize(
    "s,w,expected",
    [((0, 0, 0), 0.0, (1, 0, 0)), ((0, 0, np.pi / 2), 0.0, (0, 1, 0)), ((5, -3, 0), 1.0, (1, 0, 1))],
)
def test_dubins_flow_examples(s, w, expected):
    assert np.allclose(dyn.dubins_flow(s, w, P), expected, atol=1e-12)


@pytest.mark.parametrize(
    "r,wi,wj,expected",
    [((0, 0, 0), 0, 0, (0, 0, 0)), ((0, 0, np.pi), 0, 0, (-2, 0, 0)), ((1, 2, 0), 1, -1, (2, -1, -2))],
)
def test_relative_flow_examples(r, wi, wj, expected):
    assert np.allclose(dyn.relative_flow(r, wi, wj, P), expected, atol=1e-12)


def test_hamiltonian_and_control_examples():
    assert dyn.ham_pc((4.0, -1.0, 0.3), (0, 0, 1), P) == pytest.approx(0.0)
    assert dyn.ham_pc((0, 0, 0), (1, 0, 0), P) == pytest.approx(0.0)
    assert dyn.ham_exit((2, 3, 1), (0, 0, 0), P) == 0.0
    assert dyn.ham_frs_dubins((0, 0, 0), (1, 0, 0), P) == pytest.approx(1.0)
    assert dyn.ham_frs_dubins((0, 0, 0.4), (0, 0, -2), P) == pytest.approx(2.0)
    assert dyn.ham_free_dubins((0, 0, 0.4), (0, 0, -2), P) == pytest.approx(2.0)
    # theta' = w_j - w_i, so a positive heading costate rewards turning right
    assert dyn.opt_control_pc((0, 0, 0), (0, 0, 1), P).omega == -1.0
    assert dyn.opt_control_pc((0, 0, 0), (0, 0, -1), P).omega == 1.0
    assert dyn.opt_control_pc((0, 0, 0), (0, 0, 0), P).omega == 1.0
    assert dyn.opt_control_free((0, 0, 0), (1, 1, 0), P).omega == 1.0
    assert dyn.opt_control_free((0, 0, 0), (0, 0, -5), P).omega == -1.0
    assert np.allclose(dyn.relative_state_of((1, 2, 0.5), (1, 2, 0.5)), 0.0)
    r = dyn.relative_state_of((0, 0, 0), (2, 0, np.pi))
    assert np.allclose(r[:2], (2, 0)) and abs(abs(r[2]) - np.pi) < 1e-12


@settings(max_examples=100, deadline=None)
@given(r=state, lam=costate)
def test_exit_hamiltonian_below_conflict_hamiltonian(r, lam):
    assert dyn.ham_exit(r, lam, P) <= dyn.ham_pc(r, lam, P) + 1e-12


def test_relative_integration_matches_absolute_over_two_seconds():
    dt, steps = 1e-3, 2000
    xi, xj = np.array([0.0, 0.0, 0.2]), np.array([3.0, 1.0, 2.5])
    wi, wj = 0.7, -0.4
    r = np.array(dyn.relative_state_of(xi, xj))
    for _ in range(steps):
        k1 = dyn.relative_flow(r, wi, wj, P)
        k2 = dyn.relative_flow(r + 0.5 * dt * k1, wi, wj, P)
        r = r + dt * k2
        xi = np.array(dyn.step_dubins(xi, wi, dt, P))
        xj = np.array(dyn.step_dubins(xj, wj, dt, P))
    mapped = np.array(dyn.relative_state_of(xi, xj))
    assert np.allclose(mapped[:2], r[:2], atol=1e-5)
    assert abs(dyn.wrap_angle(mapped[2] - r[2])) < 1e-9
