"""Dubins vehicle and pairwise relative dynamics, Hamiltonians, optimal controls.

Relative states are expressed in the body frame of vehicle i: the position
of vehicle j relative to i, rotated by -theta_i, and the heading difference
theta_j - theta_i. In that frame the relative ODE is

    x' = -v + v cos(theta) + w_i y
    y' =  v sin(theta) - w_i x
    theta' = w_j - w_i

Vehicle i is the evader (maximizes the value), vehicle j the pursuer.

Every Hamiltonian accepts scalars or numpy arrays (broadcast elementwise),
so the same function serves the grid solver and pointwise controllers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from reachguard.grid import wrap_angle


@dataclass(frozen=True)
class DubinsParams:
    speed: float = 1.0
    max_turn: float = 1.0

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError(f"speed must be positive, got {self.speed}")
        if not self.max_turn > 0:
            raise ValueError(f"max_turn must be positive, got {self.max_turn}")


class DubinsState(NamedTuple):
    px: float
    py: float
    theta: float

    @classmethod
    def make(cls, px, py, theta) -> DubinsState:
        return cls(float(px), float(py), float(wrap_angle(theta)))

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


class RelativeState(NamedTuple):
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


class Control(NamedTuple):
    omega: float


def _check_control(omega: float, p: DubinsParams) -> None:
    if abs(omega) > p.max_turn * (1 + 1e-12):
        raise ValueError(f"turn rate {omega} exceeds bound {p.max_turn}")


def _sign(s):
    """Sign with sign(0) = +1."""
    return np.where(np.asarray(s) >= 0.0, 1.0, -1.0)


def dubins_flow(s, u: Control | float, p: DubinsParams) -> np.ndarray:
    omega = float(u.omega if isinstance(u, Control) else u)
    _check_control(omega, p)
    theta = s[2]
    return np.array([p.speed * np.cos(theta), p.speed * np.sin(theta), omega])


def relative_flow(r, ui: Control | float, uj: Control | float, p: DubinsParams) -> np.ndarray:
    wi = float(ui.omega if isinstance(ui, Control) else ui)
    wj = float(uj.omega if isinstance(uj, Control) else uj)
    _check_control(wi, p)
    _check_control(wj, p)
    x, y, theta = r
    v = p.speed
    return np.array([-v + v * np.cos(theta) + wi * y, v * np.sin(theta) - wi * x, wj - wi])


# The pairwise Hamiltonians below are written for the relative ODE in the
# module docstring. With theta' = w_j - w_i the costate-weighted control terms
# are  w_i (l1 y - l2 x - l3) + w_j l3.


def switching_pc(r, costate):
    """Coefficient multiplying w_i in costate . relative_flow."""
    return costate[0] * r[1] - costate[1] * r[0] - costate[2]


def ham_pc(r, costate, p: DubinsParams):
    """max over w_i, min over w_j of costate . relative_flow (avoidance game)."""
    v, wb = p.speed, p.max_turn
    drift = v * (costate[0] * (np.cos(r[2]) - 1.0) + costate[1] * np.sin(r[2]))
    return drift + wb * np.abs(switching_pc(r, costate)) - wb * np.abs(costate[2])


def ham_exit(r, costate, p: DubinsParams):
    """min over both turn rates of costate . relative_flow (cooperative approach)."""
    v, wb = p.speed, p.max_turn
    drift = v * (costate[0] * (np.cos(r[2]) - 1.0) + costate[1] * np.sin(r[2]))
    return drift - wb * np.abs(switching_pc(r, costate)) - wb * np.abs(costate[2])


def ham_frs_dubins(s, costate, p: DubinsParams):
    """max over w of costate . dubins_flow."""
    v, wb = p.speed, p.max_turn
    return v * (costate[0] * np.cos(s[2]) + costate[1] * np.sin(s[2])) + wb * np.abs(costate[2])


def ham_free_dubins(s, costate, p: DubinsParams):
    """Unconstrained-control branch of the outsider's backward Hamiltonian."""
    return ham_frs_dubins(s, costate, p)


def opt_control_pc(r, grad, p: DubinsParams) -> Control:
    """Evader turn rate attaining ham_pc for costate ``grad``."""
    return Control(float(p.max_turn * _sign(switching_pc(r, grad))))


def opt_control_free(s, grad, p: DubinsParams) -> Control:
    return Control(float(p.max_turn * _sign(grad[2])))


def relative_state_of(xi, xj) -> RelativeState:
    """State of vehicle j in the body frame of vehicle i."""
    dx = xj[0] - xi[0]
    dy = xj[1] - xi[1]
    c, s = np.cos(xi[2]), np.sin(xi[2])
    return RelativeState(float(c * dx + s * dy), float(-s * dx + c * dy), float(wrap_angle(xj[2] - xi[2])))


def relative_states(xi: np.ndarray, xj: np.ndarray) -> np.ndarray:
    """Vectorized relative_state_of over broadcastable (..., 3) arrays."""
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    dx = xj[..., 0] - xi[..., 0]
    dy = xj[..., 1] - xi[..., 1]
    c, s = np.cos(xi[..., 2]), np.sin(xi[..., 2])
    return np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(xj[..., 2] - xi[..., 2])], axis=-1)


def step_dubins(s, omega: float, dt: float, p: DubinsParams) -> DubinsState:
    """One explicit-midpoint step under a constant turn rate."""
    _check_control(omega, p)
    th_mid = s[2] + 0.5 * dt * omega
    return DubinsState(
        float(s[0] + dt * p.speed * np.cos(th_mid)),
        float(s[1] + dt * p.speed * np.sin(th_mid)),
        float(wrap_angle(s[2] + dt * omega)),
    )


def pc_alpha(grid, p: DubinsParams, local: bool = True):
    """Bounds on |dH/d(costate_k)| for ham_pc and ham_exit on a relative-state grid.

    With ``local`` the bounds are per node (independent of the costate);
    otherwise the global maxima over the grid box.
    """
    v, wb = p.speed, p.max_turn
    if not local:
        xmax = max(abs(grid.mins[0]), abs(grid.maxs[0]))
        ymax = max(abs(grid.mins[1]), abs(grid.maxs[1]))
        return [2.0 * v + wb * ymax, v + wb * xmax, 2.0 * wb]
    x, y, th = grid.states()
    return [v * (1.0 - np.cos(th)) + wb * np.abs(y), v * np.abs(np.sin(th)) + wb * np.abs(x), 2.0 * wb]


def dubins_alpha(grid, p: DubinsParams, local: bool = True):
    """Bounds on |dH/d(costate_k)| for the single-vehicle Hamiltonians."""
    if not local:
        return [p.speed, p.speed, p.max_turn]
    _, _, th = grid.states()
    return [p.speed * np.abs(np.cos(th)), p.speed * np.abs(np.sin(th)), p.max_turn]
