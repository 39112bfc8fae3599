"""Lax-Friedrichs / TVD-RK2 solvers for backward and forward reachability PDEs.

Backward mode integrates D_t V + H(x, grad V, t) = 0 from t1 down to t0 with
the target freeze V <- min(V, l(t)) after every RK stage. Forward mode
integrates D_t W + H(x, grad W, t) = 0 from t0 up to t1 with no freeze.

In reversed time tau = t1 - t the backward equation reads V_tau = H, so both
modes share one numerical flux with the dissipation sign chosen to stay
diffusive:

    backward:  V <- V + dt * (H(avg) + diss)
    forward:   W <- W - dt * (H(avg) - diss)
    diss = sum_k alpha_k * (D+_k - D-_k) / 2
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from reachguard.grid import Grid, TimeIndexedValueFunction, ValueFunction

log = logging.getLogger(__name__)

Evaluator = Callable[[tuple, tuple, float], np.ndarray]


class NumericFailure(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class CFLViolation(ValueError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    cfl: float = 0.5
    convergence_tol: float = 1e-3
    max_steps: int = 20000
    dissipation_bounds: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0 < self.cfl <= 1:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.dissipation_bounds is not None:
            if any(not a > 0 for a in self.dissipation_bounds):
                raise ValueError("dissipation bounds must be strictly positive")


@dataclass(frozen=True)
class HamiltonianSpec:
    """H(states, costate, t) on whole grids plus per-dim bounds on |dH/dp_k|.

    ``alpha`` is either a fixed sequence or a callable taking the Grid.
    """

    evaluator: Evaluator
    alpha: Callable[[Grid], Sequence[float]] | Sequence[float]

    def alpha_for(self, grid: Grid) -> list:
        """Per-dim dissipation coefficients: scalars or arrays broadcastable to the grid."""
        a = self.alpha(grid) if callable(self.alpha) else self.alpha
        a = [np.asarray(ak, dtype=float) for ak in a]
        if len(a) != grid.ndim:
            raise ValueError(f"alpha needs {grid.ndim} entries, got {len(a)}")
        return a


def zero_hamiltonian(ndim: int) -> HamiltonianSpec:
    return HamiltonianSpec(lambda x, p, t: np.zeros_like(p[0]), [1.0] * ndim)


class ConvergedValue(NamedTuple):
    value: ValueFunction
    converged: bool
    steps: int
    residual: float
    horizon: float


def _alpha(grid: Grid, ham: HamiltonianSpec, cfg: SolveConfig) -> list:
    if cfg.dissipation_bounds is not None:
        a = [np.asarray(float(ak)) for ak in cfg.dissipation_bounds]
        if len(a) != grid.ndim:
            raise ValueError(f"dissipation_bounds needs {grid.ndim} entries")
        return a
    return ham.alpha_for(grid)


def cfl_number(grid: Grid, alpha, dt: float) -> float:
    """dt * sum_k max(alpha_k) / dx_k."""
    return float(dt * sum(float(np.max(a)) / d for a, d in zip(alpha, grid.dx)))


def cfl_dt(grid: Grid, alpha, cfl: float) -> float:
    return float(cfl / cfl_number(grid, alpha, 1.0))


def one_sided_differences(grid: Grid, data: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """First-order (D-, D+) per dimension.

    Periodic dims wrap. Non-periodic dims use one ghost node per side,
    extrapolated linearly from the adjacent interior slope with the outward
    slope clamped at zero, so the ghost never lies below its boundary node.
    """
    dx = grid.dx
    out = []
    for k in range(grid.ndim):
        if grid.periodic[k]:
            fwd = np.roll(data, -1, axis=k)
            bwd = np.roll(data, 1, axis=k)
        else:
            n = data.shape[k]
            first = np.take(data, [0], axis=k)
            second = np.take(data, [1], axis=k)
            last = np.take(data, [n - 1], axis=k)
            before_last = np.take(data, [n - 2], axis=k)
            lo_ghost = first + np.maximum(first - second, 0.0)
            hi_ghost = last + np.maximum(last - before_last, 0.0)
            padded = np.concatenate([lo_ghost, data, hi_ghost], axis=k)
            idx = [slice(None)] * data.ndim
            idx[k] = slice(2, None)
            fwd = padded[tuple(idx)]
            idx[k] = slice(0, n)
            bwd = padded[tuple(idx)]
        out.append(((data - bwd) / dx[k], (fwd - data) / dx[k]))
    return out


def _flux_terms(grid, states, data, ham: HamiltonianSpec, t, alpha):
    diffs = one_sided_differences(grid, data)
    costate = tuple(0.5 * (dm + dp) for dm, dp in diffs)
    h = np.asarray(ham.evaluator(states, costate, t), dtype=float)
    diss = np.zeros_like(data)
    for a, (dm, dp) in zip(alpha, diffs):  # a may be a per-node array
        diss += 0.5 * a * (dp - dm)
    return h, diss


def _euler(grid, states, data, ham, t, dt, alpha, backward: bool):
    h, diss = _flux_terms(grid, states, data, ham, t, alpha)
    if backward:
        return data + dt * (h + diss)
    return data - dt * (h - diss)


def lax_friedrichs_step(
    v: ValueFunction,
    ham: HamiltonianSpec,
    t: float,
    dt: float,
    backward: bool = True,
    cfg: SolveConfig = SolveConfig(),
) -> ValueFunction:
    """One forward-Euler Lax-Friedrichs stage (the building block of TVD-RK2)."""
    alpha = _alpha(v.grid, ham, cfg)
    if dt <= 0 or cfl_number(v.grid, alpha, dt) > cfg.cfl * (1 + 1e-12):
        raise CFLViolation(f"dt={dt} violates CFL bound {cfg.cfl}")
    out = _euler(v.grid, v.grid.states(), v.data, ham, t, dt, alpha, backward)
    return ValueFunction(v.grid, out)


def _check(data: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericFailure("non-finite values produced", step)


def _tvd_rk2(grid, states, data, ham, t, dt, alpha, backward, freeze=None):
    t_next = t - dt if backward else t + dt
    s1 = _euler(grid, states, data, ham, t, dt, alpha, backward)
    if freeze is not None:
        s1 = np.minimum(s1, freeze)
    s2 = _euler(grid, states, s1, ham, t_next, dt, alpha, backward)
    out = 0.5 * (data + s2)
    if freeze is not None:
        out = np.minimum(out, freeze)
    return out


def _march_times(t_start, t_end, dt_max, stops):
    """Yield (t, t_next) pairs from t_start to t_end, landing exactly on each stop."""
    direction = -1.0 if t_end < t_start else 1.0
    targets = sorted({float(s) for s in stops if direction * (s - t_start) > 0} | {float(t_end)})
    if direction < 0:
        targets.reverse()
    t = float(t_start)
    for stop in targets:
        while direction * (stop - t) > 0:
            remaining = abs(stop - t)
            if remaining <= dt_max:
                t_next = stop
            else:
                t_next = t + direction * dt_max
            yield t, t_next
            t = t_next


def _keep(t: float, keep) -> bool:
    return keep is None or any(abs(t - s) < 1e-9 for s in keep)


def solve_brs_time_varying(
    grid: Grid,
    target: TimeIndexedValueFunction,
    ham: HamiltonianSpec,
    t0: float,
    t1: float,
    cfg: SolveConfig = SolveConfig(),
    output_times: Sequence[float] | None = None,
) -> TimeIndexedValueFunction:
    """Backward solve with time-varying target and freeze V <- min(V, l(t)).

    Frames are kept at every accepted step unless ``output_times`` is given,
    in which case the march lands exactly on those times and keeps only them
    (plus t0 and t1). Target frames are looked up piecewise-constantly: the
    earliest stored frame at or after the query time.
    """
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    if target.grid != grid:
        raise ValueError("target lives on a different grid")
    alpha = _alpha(grid, ham, cfg)
    dt_max = cfl_dt(grid, alpha, cfg.cfl)
    if not dt_max > 0:
        raise NumericFailure("CFL-computed dt is not positive", 0)
    states = grid.states()
    keep = None if output_times is None else [float(s) for s in output_times] + [t0]
    stops = [] if output_times is None else [s for s in output_times if t0 < s < t1]

    data = np.array(target.data[target.index_at_or_after(t1)])
    times, frames = [t1], [data]
    for step, (t, t_next) in enumerate(_march_times(t1, t0, dt_max, stops), start=1):
        freeze = target.data[target.index_at_or_after(t_next)]
        data = _tvd_rk2(grid, states, data, ham, t, t - t_next, alpha, True, freeze)
        _check(data, step)
        if _keep(t_next, keep):
            times.append(t_next)
            frames.append(data)
    times.reverse()
    frames.reverse()
    return TimeIndexedValueFunction(grid, np.array(times), np.stack(frames))


def solve_brs_to_convergence(
    grid: Grid,
    target: ValueFunction,
    ham: HamiltonianSpec,
    cfg: SolveConfig = SolveConfig(),
) -> ConvergedValue:
    """Infinite-horizon limit of the static-target backward solve.

    Steps until max |dV|/dt over the grid drops below cfg.convergence_tol or
    cfg.max_steps is reached (then ``converged`` is False).
    """
    if target.grid != grid:
        raise ValueError("target lives on a different grid")
    alpha = _alpha(grid, ham, cfg)
    dt = cfl_dt(grid, alpha, cfg.cfl)
    if not dt > 0:
        raise NumericFailure("CFL-computed dt is not positive", 0)
    states = grid.states()
    l = target.data
    data = np.array(l)
    residual = np.inf
    t = 0.0
    for step in range(1, cfg.max_steps + 1):
        new = _tvd_rk2(grid, states, data, ham, t, dt, alpha, True, l)
        _check(new, step)
        residual = float(np.max(np.abs(new - data))) / dt
        data = new
        t -= dt
        if step % 200 == 0:
            log.debug("step %d tau=%.3f residual=%.3e", step, -t, residual)
        if residual < cfg.convergence_tol:
            return ConvergedValue(ValueFunction(grid, data), True, step, residual, -t)
    return ConvergedValue(ValueFunction(grid, data), False, cfg.max_steps, residual, -t)


def solve_frs(
    grid: Grid,
    initial: ValueFunction,
    ham: HamiltonianSpec,
    t0: float,
    t1: float,
    cfg: SolveConfig = SolveConfig(),
    output_times: Sequence[float] | None = None,
) -> TimeIndexedValueFunction:
    """Forward solve from W(t0) = initial, no freeze."""
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    if initial.grid != grid:
        raise ValueError("initial value lives on a different grid")
    alpha = _alpha(grid, ham, cfg)
    dt_max = cfl_dt(grid, alpha, cfg.cfl)
    if not dt_max > 0:
        raise NumericFailure("CFL-computed dt is not positive", 0)
    states = grid.states()
    stops = [] if output_times is None else [s for s in output_times if t0 < s < t1]
    keep = None if output_times is None else [float(s) for s in output_times] + [t1]

    data = np.array(initial.data)
    times, frames = [t0], [data]
    for step, (t, t_next) in enumerate(_march_times(t0, t1, dt_max, stops), start=1):
        data = _tvd_rk2(grid, states, data, ham, t, t_next - t, alpha, False)
        _check(data, step)
        if _keep(t_next, keep):
            times.append(t_next)
            frames.append(data)
    return TimeIndexedValueFunction(grid, np.array(times), np.stack(frames))
