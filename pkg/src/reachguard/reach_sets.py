"""Pairwise conflict tables, outsider unsafe region and its reachable sets.

Conventions
-----------
* Pairwise tables live on a relative-state grid (body frame of the evader).
* Outsider sets live on the outsider's absolute pose grid (px, py, theta).
  The potential-conflict set of the outsider with vehicle j at time t is the
  pullback  {x_O : v_pc(relative_state_of(x_O, x_j(t))) <= K}.
* Relative states that fall outside the relative grid are non-conflicting;
  scalar queries report +inf, grid-valued frames use the largest v_pc value
  so that frames stay finite.
"""

from __future__ import annotations

import functools
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from reachguard import dynamics as dyn
from reachguard.dynamics import DubinsParams, DubinsState
from reachguard.grid import (
    Grid,
    GridMismatchError,
    TimeIndexedValueFunction,
    ValueFunction,
    gradient,
    interpolate,
    make_signed_distance_disk,
    wrap_angle,
)
from reachguard.hj_solver import (
    HamiltonianSpec,
    SolveConfig,
    solve_brs_time_varying,
    solve_brs_to_convergence,
    solve_frs,
)

log = logging.getLogger(__name__)

# Defaults reproduce the published experiment parameters.
DEFAULT_RC = 3.0
DEFAULT_TE = 2.0
DEFAULT_K = 2.0


def pc_hamiltonian(p: DubinsParams) -> HamiltonianSpec:
    return HamiltonianSpec(lambda x, lam, t: dyn.ham_pc(x, lam, p), lambda g: dyn.pc_alpha(g, p))


def exit_hamiltonian(p: DubinsParams) -> HamiltonianSpec:
    return HamiltonianSpec(lambda x, lam, t: dyn.ham_exit(x, lam, p), lambda g: dyn.pc_alpha(g, p))


def frs_hamiltonian(p: DubinsParams) -> HamiltonianSpec:
    return HamiltonianSpec(lambda x, lam, t: dyn.ham_frs_dubins(x, lam, p), lambda g: dyn.dubins_alpha(g, p))


def cell_slack(grid: Grid) -> float:
    """One cell of slack in value units for planar-distance-like value functions."""
    return float(np.max(grid.dx[:2]))


@dataclass(frozen=True)
class PairwiseTables:
    v_pc: ValueFunction
    v_exit: ValueFunction
    K: float = DEFAULT_K
    Te: float = DEFAULT_TE
    Rc: float = DEFAULT_RC
    params: DubinsParams = field(default_factory=DubinsParams)
    converged: bool = True

    @property
    def grid(self) -> Grid:
        return self.v_pc.grid

    @property
    def fill(self) -> float:
        """Stand-in v_pc value for relative states outside the grid."""
        return float(np.max(self.v_pc.data))

    def with_threshold(self, K: float) -> PairwiseTables:
        return PairwiseTables(self.v_pc, self.v_exit, K, self.Te, self.Rc, self.params, self.converged)


def compute_pairwise_tables(
    grid_rel: Grid,
    params: DubinsParams = DubinsParams(),
    Rc: float = DEFAULT_RC,
    Te: float = DEFAULT_TE,
    K: float = DEFAULT_K,
    cfg: SolveConfig = SolveConfig(),
) -> PairwiseTables:
    """Te-buffer value and converged potential-conflict value on a relative grid.

    The buffer is the backward set of the Rc danger disk over [0, Te] with both
    vehicles steering toward collision. The conflict value is the
    infinite-horizon avoidance value with the buffer as the danger zone.
    """
    if Rc <= 0 or Te <= 0 or K <= 0:
        raise ValueError("Rc, Te and K must be positive")
    disk = make_signed_distance_disk(grid_rel, (0.0, 0.0), Rc)
    exit_frames = solve_brs_time_varying(
        grid_rel,
        TimeIndexedValueFunction.constant(disk),
        exit_hamiltonian(params),
        0.0,
        Te,
        cfg,
        output_times=[0.0],
    )
    v_exit = exit_frames.frame(0)
    res = solve_brs_to_convergence(grid_rel, v_exit, pc_hamiltonian(params), cfg)
    if not res.converged:
        log.warning("conflict value not converged after %d steps (residual %.2e)", res.steps, res.residual)
    return PairwiseTables(res.value, v_exit, K, Te, Rc, params, res.converged)


def pc_values(tables: PairwiseTables, rel: np.ndarray, fill: float | None = None) -> np.ndarray:
    """v_pc at an array of relative states (..., 3); out-of-grid -> ``fill``."""
    return interpolate(tables.v_pc, rel, fill_value=tables.fill if fill is None else fill)


def pcs_membership(tables: PairwiseTables, xi, xj) -> tuple[bool, float]:
    """Is vehicle i inside the potential-conflict set with respect to j?"""
    rel = np.asarray(dyn.relative_state_of(xi, xj))
    if not bool(tables.grid.contains(rel)):
        return False, float("inf")
    value = interpolate(tables.v_pc, rel)
    return bool(value <= tables.K), float(value)


def exit_value(tables: PairwiseTables, xi, xj) -> float:
    rel = np.asarray(dyn.relative_state_of(xi, xj))
    if not bool(tables.grid.contains(rel)):
        return float("inf")
    return float(interpolate(tables.v_exit, rel))


@dataclass(frozen=True)
class TrajectorySet:
    """Sampled paths of several vehicles on one shared time list."""

    times: np.ndarray  # (T,)
    states: np.ndarray  # (n, T, 3)
    vehicle_ids: tuple[int, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[1] != times.size or states.shape[2] != 3:
            raise ValueError(f"states shape {states.shape} does not match {times.size} samples")
        if len(self.vehicle_ids) != states.shape[0]:
            raise ValueError("one id per trajectory required")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "vehicle_ids", tuple(int(i) for i in self.vehicle_ids))

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    def state_at(self, t: float) -> np.ndarray:
        """(n, 3) states at time t, linear in position and (unwrapped) heading."""
        times = self.times
        t = float(np.clip(t, times[0], times[-1]))
        i = int(np.searchsorted(times, t, side="right")) - 1
        i = min(max(i, 0), times.size - 2) if times.size > 1 else 0
        if times.size == 1:
            return self.states[:, 0].copy()
        w = (t - times[i]) / (times[i + 1] - times[i])
        a, b = self.states[:, i], self.states[:, i + 1]
        dth = wrap_angle(b[:, 2] - a[:, 2])
        out = a + w * (b - a)
        out[:, 2] = wrap_angle(a[:, 2] + w * dth)
        return out

    def subset(self, ids) -> TrajectorySet:
        rows = [self.vehicle_ids.index(i) for i in ids]
        return TrajectorySet(self.times, self.states[rows], tuple(ids))


def frame_times(times: np.ndarray, stride: int = 5) -> np.ndarray:
    """Every ``stride``-th sample time, always including the last one."""
    picked = list(times[::stride])
    if picked[-1] != times[-1]:
        picked.append(times[-1])
    return np.asarray(picked, dtype=float) - times[0]


@functools.lru_cache(maxsize=4)
def _pose_cloud(grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid nodes with the cosine and sine of their headings, reused across frames."""
    pts = grid.points()
    return pts, np.cos(pts[:, 2]), np.sin(pts[:, 2])


def _pullback_relative(grid: Grid, xj) -> np.ndarray:
    """relative_states(node, xj) for every node of an absolute pose grid."""
    pts, c, s = _pose_cloud(grid)
    dx = xj[0] - pts[:, 0]
    dy = xj[1] - pts[:, 1]
    return np.stack([c * dx + s * dy, c * dy - s * dx, wrap_angle(xj[2] - pts[:, 2])], axis=-1)


def _membership_arrays(tables: PairwiseTables, grid: Grid, vehicle_states: np.ndarray):
    """Per-vehicle (v_pc - K) over all outsider grid nodes, plus relative states."""
    rels, values = [], []
    for xj in vehicle_states:
        rel = _pullback_relative(grid, xj)
        rels.append(rel)
        values.append(pc_values(tables, rel) - tables.K)
    return np.stack(values), rels


def _union_of_pairwise_intersections(values: np.ndarray) -> np.ndarray:
    out = np.full(values.shape[1:], np.inf)
    for a, b in itertools.combinations(range(values.shape[0]), 2):
        out = np.minimum(out, np.maximum(values[a], values[b]))
    return out


def compute_our(
    tables: PairwiseTables,
    trajectories: TrajectorySet,
    outsider_grid: Grid,
    stride: int = 5,
) -> TimeIndexedValueFunction:
    """Outsider unsafe region: states in potential conflict with two or more vehicles.

    Frames are produced at every ``stride``-th trajectory sample (and the last
    one); frame times are measured from the first sample.
    """
    if len(trajectories) < 2:
        raise ValueError("need at least two trajectories")
    times = frame_times(trajectories.times, stride)
    frames = []
    for t in times:
        vals, _ = _membership_arrays(tables, outsider_grid, trajectories.state_at(trajectories.times[0] + t))
        frames.append(_union_of_pairwise_intersections(vals).reshape(outsider_grid.shape))
    return TimeIndexedValueFunction(outsider_grid, times, np.stack(frames))


# --- forward reachable set of the outsider -------------------------------------


def frs_seed(grid: Grid, heading_cells: float = 3.0) -> ValueFunction:
    """Point-like pose seed at the origin.

    A 1.5-cell planar disk intersected with a heading band of ``heading_cells``
    cells. The heading term is rescaled to planar units per cell so both
    cones have the same depth in grid cells; a thinner band is dissipated
    away by the scheme within a few steps.
    """
    dx = grid.dx
    h = max(dx[0], dx[1])
    x, y, th = grid.states()
    planar = np.hypot(x, y) - 1.5 * h
    heading = (np.abs(wrap_angle(th)) - heading_cells * dx[2]) * (h / dx[2])
    return ValueFunction(grid, np.maximum(planar, heading))


def solve_origin_frs(
    grid: Grid,
    params: DubinsParams,
    horizon: float,
    cfg: SolveConfig = SolveConfig(),
    output_times=None,
) -> TimeIndexedValueFunction:
    """Offline FRS table for a vehicle starting at pose (0, 0, 0)."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if output_times is None:
        output_times = np.union1d(np.arange(0.0, horizon, 0.25), [horizon])
    return solve_frs(grid, frs_seed(grid), frs_hamiltonian(params), 0.0, horizon, cfg, output_times=output_times)


@dataclass(frozen=True)
class OutsiderFrs:
    """Origin-centred FRS table re-posed at a seed state by inverse-mapping queries."""

    origin: TimeIndexedValueFunction
    seed: DubinsState

    @property
    def fill(self) -> float:
        return float(np.max(self.origin.data))

    def to_origin(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        px, py, th = self.seed
        dx = points[..., 0] - px
        dy = points[..., 1] - py
        c, s = np.cos(th), np.sin(th)
        return np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(points[..., 2] - th)], axis=-1)

    # The FRS only grows, so the first stored frame at or after t is the
    # conservative choice between samples.

    def value(self, t: float, points) -> np.ndarray:
        frame = self.origin.at(t, rule="after")
        return interpolate(frame, self.to_origin(points), fill_value=self.fill)

    def on_grid(self, grid: Grid, times) -> TimeIndexedValueFunction:
        pts = grid.points()
        local = self.to_origin(pts)
        frames = [
            interpolate(self.origin.at(t, rule="after"), local, fill_value=self.fill).reshape(grid.shape)
            for t in times
        ]
        return TimeIndexedValueFunction(grid, np.asarray(times, dtype=float), np.stack(frames))


def compute_frs_outsider(
    grid_abs: Grid,
    seed_state,
    params: DubinsParams,
    Tr: float,
    cfg: SolveConfig = SolveConfig(),
    origin: TimeIndexedValueFunction | None = None,
) -> OutsiderFrs:
    """FRS of the outsider from ``seed_state`` over [0, Tr].

    ``grid_abs`` is the origin-centred grid of the offline table; a cached
    table may be passed as ``origin`` (it must reach Tr).
    """
    if Tr <= 0:
        raise ValueError("Tr must be positive")
    if origin is None:
        origin = solve_origin_frs(grid_abs, params, Tr, cfg)
    elif origin.times[-1] < Tr - 1e-9:
        raise ValueError(f"FRS table covers {origin.times[-1]} s, need {Tr}")
    return OutsiderFrs(origin, DubinsState.make(*seed_state))


def _frame_before(tv: TimeIndexedValueFunction, t: float) -> np.ndarray:
    return tv.data[tv.index_at_or_before(t)]


def frs_intersects_our(frs: TimeIndexedValueFunction, our: TimeIndexedValueFunction) -> float | None:
    """First sample time at which the FRS meets the unsafe region, or None."""
    if frs.grid != our.grid:
        raise GridMismatchError("FRS and OUR must share a grid")
    times = np.union1d(frs.times, our.times)
    for t in times:
        both = np.maximum(_frame_before(frs, t), _frame_before(our, t))
        if np.min(both) <= 0.0:
            return float(t)
    return None


# --- minimal backward reachable set from OUR -----------------------------------


class _OutsiderModes:
    """Per-frame Hamiltonian data for the outsider's backward solve.

    For each OUR frame: which nodes lie in exactly one pullback conflict set,
    the pairwise avoidance turn rate against that vehicle there, and which of
    nodes sit on a band where the flow is discontinuous: a neighbour turns
    the other way, or the node borders a conflict set. On the band a real
    controller chatters, so any turn rate is admitted and the worst one is
    taken.
    """

    def __init__(self, tables: PairwiseTables, trajectories: TrajectorySet, our: TimeIndexedValueFunction):
        self.tables = tables
        self.traj = trajectories
        self.our = our
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def frame(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        hit = self._cache.get(k)
        if hit is not None:
            return hit
        # keep only the frame in use plus its neighbour; frames are visited in order
        if len(self._cache) > 2:
            self._cache.clear()
        t = self.traj.times[0] + self.our.times[k]
        states = self.traj.state_at(t)
        vals, rels = _membership_arrays(self.tables, self.our.grid, states)
        inside = vals <= 0.0
        single = inside.sum(axis=0) == 1
        omega = np.zeros(single.shape)
        if np.any(single):
            which = np.argmax(inside, axis=0)
            for j in range(len(rels)):
                sel = single & (which == j)
                if not np.any(sel):
                    continue
                r = rels[j][sel]
                g = gradient(self.tables.v_pc, r)
                s = dyn.switching_pc(r.T, g.T)
                omega[sel] = self.tables.params.max_turn * np.where(s >= 0.0, 1.0, -1.0)
        shape = self.our.grid.shape
        single, omega = single.reshape(shape), omega.reshape(shape)
        modes = tuple("wrap" if per else "nearest" for per in self.our.grid.periodic)
        hi = ndimage.maximum_filter(np.where(single, omega, -np.inf), size=3, mode=modes)
        lo = ndimage.minimum_filter(np.where(single, omega, np.inf), size=3, mode=modes)
        edge = ndimage.maximum_filter(single, size=3, mode=modes) != ndimage.minimum_filter(single, size=3, mode=modes)
        out = (single, omega, (single & (hi > lo)) | edge)
        self._cache[k] = out
        return out

    def hamiltonian(self) -> HamiltonianSpec:
        p = self.tables.params
        grid = self.our.grid
        _, _, th = grid.states()
        c, s = np.cos(th), np.sin(th)

        def evaluator(x, lam, t):
            single, omega, band = self.frame(self.our.index_at_or_after(t))
            drift = p.speed * (lam[0] * c + lam[1] * s)
            free = p.max_turn * np.abs(lam[2])
            return drift + np.where(band, -free, np.where(single, lam[2] * omega, free))

        return HamiltonianSpec(evaluator, lambda g: dyn.dubins_alpha(g, p))


def compute_brs_minus(
    our: TimeIndexedValueFunction,
    trajectories: TrajectorySet,
    tables: PairwiseTables,
    params: DubinsParams,
    Tr: float,
    cfg: SolveConfig = SolveConfig(),
    margin: float | None = None,
) -> TimeIndexedValueFunction:
    """Minimal backward reachable set of the unsafe region over [0, Tr].

    Nodes inside exactly one pullback conflict set are driven by the pairwise
    avoidance control against that vehicle; elsewhere the outsider's control
    maximizes. Nodes in two or more sets are inside OUR and held by the freeze.

    The target is OUR dilated by ``margin`` value units (default one cell):
    the first-order scheme under-resolves the set by about a cell, and an
    under-approximated minimal BRS would certify unsafe starts.
    """
    if params != tables.params:
        raise ValueError("tables were computed for different vehicle parameters")
    if our.times[0] > 1e-9 or our.times[-1] < Tr - 1e-9:
        raise ValueError("OUR frames must cover [0, Tr]")
    margin = cell_slack(our.grid) if margin is None else float(margin)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    target = TimeIndexedValueFunction(our.grid, our.times, our.data - margin)
    modes = _OutsiderModes(tables, trajectories, our)
    return solve_brs_time_varying(our.grid, target, modes.hamiltonian(), 0.0, Tr, cfg, output_times=our.times)


@dataclass(frozen=True)
class OutsiderSets:
    our: TimeIndexedValueFunction
    frs: TimeIndexedValueFunction | None  # None when no FRS table covered Tr
    Tr: float
    brs_minus: TimeIndexedValueFunction | None = None
    frs_hit: float | None = None  # first FRS/OUR intersection time
