"""Staged N+1 avoidance: conflict graph, stage automaton, outsider selection and control.

Stages
------
0  conflict size below N: pairwise avoidance by priority.
1  conflict size N: the N conflicting vehicles run the N-vehicle algorithm,
   the remaining vehicle is protected as the outsider.
2  conflict size N+1: an outsider is elected, the rest run the N-vehicle
   algorithm.
3  the outsider entered a buffer set during stage 2 and exits the airspace.

The N-vehicle algorithm is pluggable (``handle_n``); the baseline provided
here simulates priority-ordered pairwise avoidance.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

import numpy as np

from reachguard import dynamics as dyn
from reachguard.control import Goal, goal_controller
from reachguard.dynamics import Control, DubinsParams
from reachguard.grid import Grid, TimeIndexedValueFunction, gradient, interpolate
from reachguard.hj_solver import SolveConfig
from reachguard.reach_sets import (
    OutsiderSets,
    PairwiseTables,
    TrajectorySet,
    cell_slack,
    compute_brs_minus,
    compute_frs_outsider,
    compute_our,
    exit_value,
    frs_intersects_our,
    pcs_membership,
)

log = logging.getLogger(__name__)

FRS_CLEAR = "frs_clear"
BRS_MINUS_CLEAR = "brs_minus_clear"
UNGUARANTEED = "unguaranteed"
GUARANTEES = (FRS_CLEAR, BRS_MINUS_CLEAR, UNGUARANTEED)

MAX_RESOLUTION_TIME = 60.0


class ProtocolError(RuntimeError):
    """The N-vehicle algorithm could not honour its contract."""


# --- conflict graph -------------------------------------------------------------


@dataclass(frozen=True)
class ConflictGraph:
    vehicle_count: int
    edges: frozenset = frozenset()

    def __post_init__(self):
        edges = frozenset(tuple(sorted((int(a), int(b)))) for a, b in self.edges)
        for a, b in edges:
            if a == b:
                raise ValueError(f"self-loop on vehicle {a}")
            if not (0 <= a < self.vehicle_count and 0 <= b < self.vehicle_count):
                raise ValueError(f"edge {(a, b)} out of range")
        object.__setattr__(self, "edges", edges)

    def degree(self, i: int) -> int:
        return sum(1 for e in self.edges if i in e)

    def members(self) -> list[int]:
        """Vehicles with at least one edge, ascending."""
        return sorted({i for e in self.edges for i in e})

    def restricted(self, ids) -> ConflictGraph:
        ids = set(ids)
        return ConflictGraph(self.vehicle_count, frozenset(e for e in self.edges if set(e) <= ids))


def conflict_graph(states, tables: PairwiseTables, active=None) -> ConflictGraph:
    """Edge {i, j} iff either vehicle is inside the other's potential-conflict set.

    Vehicles with ``active[i]`` false get no edges.
    """
    n = len(states)
    if n < 2:
        raise ValueError("need at least two vehicles")
    active = [True] * n if active is None else list(active)
    edges = set()
    for i, j in itertools.combinations(range(n), 2):
        if not (active[i] and active[j]):
            continue
        if pcs_membership(tables, states[i], states[j])[0] or pcs_membership(tables, states[j], states[i])[0]:
            edges.add((i, j))
    return ConflictGraph(n, frozenset(edges))


def conflict_size(g: ConflictGraph) -> int:
    return len(g.members())


# --- stage automaton ------------------------------------------------------------


class StageKind(IntEnum):
    STAGE0 = 0
    STAGE1 = 1
    STAGE2 = 2
    STAGE3 = 3


@dataclass(frozen=True)
class Stage:
    kind: StageKind = StageKind.STAGE0
    entry_time: float = 0.0


@dataclass(frozen=True)
class Clocks:
    t: float
    resolution_time: float | None = None  # absolute time at which the current Tr elapses


def _stage_for_size(size: int, N: int) -> StageKind:
    if size < N:
        return StageKind.STAGE0
    if size == N:
        return StageKind.STAGE1
    # sizes above N+1 are outside the framework's scope; handled as stage 2
    return StageKind.STAGE2


def stage_transition(current: Stage, g: ConflictGraph, N: int, clocks: Clocks, buffer_hit: bool) -> Stage:
    """Next stage. Pure; equal stages keep their entry time."""
    t = clocks.t
    size = conflict_size(g)
    kind = current.kind
    if kind == StageKind.STAGE3:
        return current
    if kind in (StageKind.STAGE1, StageKind.STAGE2):
        resolved = clocks.resolution_time is not None and t >= clocks.resolution_time - 1e-9
        if kind == StageKind.STAGE2 and buffer_hit and not resolved:
            return Stage(StageKind.STAGE3, t)
        if not resolved:
            if kind == StageKind.STAGE1 and size > N:
                return Stage(StageKind.STAGE2, t)
            return current
        # Tr elapsed: start over from stage 0 rules, as a new episode
        return Stage(_stage_for_size(size, N), t)
    nxt = _stage_for_size(size, N)
    return current if nxt == kind else Stage(nxt, t)


# --- N-vehicle algorithm --------------------------------------------------------


@dataclass(frozen=True)
class NAvoidanceResult:
    Tr: float
    trajectories: TrajectorySet

    def __post_init__(self):
        if not self.Tr > 0:
            raise ValueError("Tr must be positive")


def avoid_control(tables: PairwiseTables, xi, xj) -> Control:
    """Pairwise avoidance turn rate of vehicle i against vehicle j."""
    rel = np.asarray(dyn.relative_state_of(xi, xj))
    grad = gradient(tables.v_pc, rel)
    return dyn.opt_control_pc(rel, grad, tables.params)


def priority_controls(states, goals: Sequence[Goal], tables: PairwiseTables, active=None) -> np.ndarray:
    """Baseline law: vehicle i avoids the lowest-index j < i whose conflict set it is in, else goal pursuit."""
    n = len(states)
    active = [True] * n if active is None else list(active)
    p = tables.params
    omega = np.zeros(n)
    for i in range(n):
        if not active[i]:
            continue
        for j in range(i):
            if active[j] and pcs_membership(tables, states[i], states[j])[0]:
                omega[i] = avoid_control(tables, states[i], states[j]).omega
                break
        else:
            omega[i] = goal_controller(states[i], goals[i], p).omega
    return omega


def handle_n(
    states,
    goals: Sequence[Goal],
    tables: PairwiseTables,
    params: DubinsParams,
    dt: float,
    ids: Sequence[int] | None = None,
    max_time: float = MAX_RESOLUTION_TIME,
) -> NAvoidanceResult:
    """Priority-ordered pairwise avoidance simulated until the conflict size drops by one.

    Captured vehicles (inside their goal radius) hold position and leave the
    conflict graph. With no conflict at all the result is the degenerate
    Tr = dt with straight, unchanged-course paths.
    """
    states = np.array([np.asarray(s, dtype=float) for s in states])
    n = len(states)
    if n < 2:
        raise ValueError("handle_n needs at least two vehicles")
    if params != tables.params:
        raise ValueError("tables were computed for different vehicle parameters")
    ids = tuple(range(n)) if ids is None else tuple(ids)

    def active_mask(x):
        return [not goals[i].reached(x[i]) for i in range(n)]

    size0 = conflict_size(conflict_graph(states, tables, active_mask(states)))
    path = [states.copy()]
    if size0 == 0:
        nxt = np.array([dyn.step_dubins(s, 0.0, dt, params) for s in states])
        path.append(nxt)
        return NAvoidanceResult(dt, TrajectorySet(np.array([0.0, dt]), np.stack(path, axis=1), ids))

    x = states.copy()
    steps = int(np.ceil(max_time / dt))
    for k in range(1, steps + 1):
        act = active_mask(x)
        omega = priority_controls(x, goals, tables, act)
        x = np.array([dyn.step_dubins(x[i], omega[i], dt, params) if act[i] else x[i] for i in range(n)])
        path.append(x.copy())
        if conflict_size(conflict_graph(x, tables, active_mask(x))) <= size0 - 1:
            times = dt * np.arange(k + 1)
            return NAvoidanceResult(k * dt, TrajectorySet(times, np.stack(path, axis=1), ids))
    raise ProtocolError(f"conflict size did not drop within {max_time} s")


HandleN = Callable[..., NAvoidanceResult]


# --- outsider -------------------------------------------------------------------


@dataclass(frozen=True)
class OutsiderConfig:
    """Everything the outsider computations need beyond the pairwise tables."""

    grid: Grid  # absolute pose grid for OUR / BRS- / FRS
    frs_table: TimeIndexedValueFunction | None = None  # origin-centred FRS; None skips the fast test
    solve: SolveConfig = SolveConfig()
    dt: float = 0.05
    stride: int = 5
    handle_n: HandleN = handle_n


@dataclass(frozen=True)
class OutsiderAssignment:
    outsider_index: int
    Tr: float
    n_trajectories: TrajectorySet | None
    sets: OutsiderSets | None
    guarantee: str
    goal: Goal

    def __post_init__(self):
        if self.guarantee not in GUARANTEES:
            raise ValueError(f"unknown guarantee {self.guarantee!r}")
        if self.n_trajectories is not None and self.outsider_index in self.n_trajectories.vehicle_ids:
            raise ValueError("outsider cannot be one of the N handled vehicles")
        if self.guarantee == FRS_CLEAR and (self.sets is None or self.sets.frs_hit is not None):
            raise ValueError("frs_clear requires a non-intersecting FRS")


def assess_outsider(
    outsider: int,
    states,
    goals: Sequence[Goal],
    tables: PairwiseTables,
    params: DubinsParams,
    cfg: OutsiderConfig,
    active=None,
) -> OutsiderAssignment:
    """Sets and guarantee class for one outsider choice.

    Runs the N-vehicle algorithm on the others, builds the unsafe region, then
    tries the FRS test and, failing that, the minimal backward reachable set.
    Protocol errors from the N-vehicle algorithm propagate.
    """
    n = len(states)
    active = [True] * n if active is None else list(active)
    others = [i for i in range(n) if i != outsider and active[i]]
    res = cfg.handle_n([states[i] for i in others], [goals[i] for i in others], tables, params, cfg.dt, ids=others)
    traj = res.trajectories
    our = compute_our(tables, traj, cfg.grid, cfg.stride)
    x_o = np.asarray(states[outsider], dtype=float)
    eps = cell_slack(cfg.grid)

    frs_grid, hit = None, 0.0
    if cfg.frs_table is not None and cfg.frs_table.times[-1] >= res.Tr - 1e-9:
        frs = compute_frs_outsider(cfg.frs_table.grid, x_o, params, res.Tr, cfg.solve, origin=cfg.frs_table)
        frs_grid = frs.on_grid(cfg.grid, our.times)
        hit = frs_intersects_our(frs_grid, our)
        if hit is None:
            sets = OutsiderSets(our, frs_grid, res.Tr, None, None)
            return OutsiderAssignment(outsider, res.Tr, traj, sets, FRS_CLEAR, goals[outsider])
    elif cfg.frs_table is not None:
        log.info("FRS table covers %.2f s < Tr = %.2f s; skipping fast test", cfg.frs_table.times[-1], res.Tr)

    brs = compute_brs_minus(our, traj, tables, params, res.Tr, cfg.solve)
    v0 = interpolate(brs.frame(0), x_o, fill_value=np.inf)
    guarantee = BRS_MINUS_CLEAR if v0 > eps else UNGUARANTEED
    sets = OutsiderSets(our, frs_grid, res.Tr, brs, hit)
    return OutsiderAssignment(outsider, res.Tr, traj, sets, guarantee, goals[outsider])


def pick_outsider(
    states,
    goals: Sequence[Goal],
    tables: PairwiseTables,
    params: DubinsParams,
    cfg: OutsiderConfig,
    active=None,
    graph: ConflictGraph | None = None,
) -> OutsiderAssignment:
    """Elect an outsider among the least-conflicted vehicles.

    Candidates are the minimum-degree vehicles in ascending index order; the
    first one passing the FRS test or lying outside its minimal BRS wins.
    Otherwise the first candidate is returned as unguaranteed (with its sets
    when they could be computed).
    """
    n = len(states)
    active = [True] * n if active is None else list(active)
    g = conflict_graph(states, tables, active) if graph is None else graph
    pool = [i for i in range(n) if active[i]]
    if not pool:
        raise ValueError("no active vehicles")
    low = min(g.degree(i) for i in pool)
    candidates = [i for i in pool if g.degree(i) == low]
    fallback = None
    for c in candidates:
        try:
            a = assess_outsider(c, states, goals, tables, params, cfg, active)
        except ProtocolError as err:
            log.info("candidate %d skipped: %s", c, err)
            continue
        if a.guarantee != UNGUARANTEED:
            return a
        if fallback is None and c == candidates[0]:
            fallback = a
    if fallback is not None:
        return fallback
    return OutsiderAssignment(candidates[0], 0.0, None, None, UNGUARANTEED, goals[candidates[0]])


def _pc_values(tables: PairwiseTables, x_o, others) -> np.ndarray:
    return np.array([pcs_membership(tables, x_o, xj)[1] for xj in others])


def outsider_control(
    assignment: OutsiderAssignment,
    x_o,
    t: float,
    tables: PairwiseTables,
    others=None,
) -> Control:
    """Outsider turn rate at time ``t`` (seconds since the assignment).

    Inside exactly one conflict set the pairwise avoidance control against that
    vehicle is mandatory. Outside all of them, with a minimal BRS available, a
    state within half a cell of (or inside) that set steers along its gradient;
    otherwise the outsider pursues its goal. The set is blended linearly
    between its stored frames. Two or more simultaneous conflicts
    (only reachable without a guarantee) get best-effort avoidance of the
    vehicle with the smallest conflict value.

    The N vehicles are taken from the broadcast trajectories, or from
    ``others`` when given.
    """
    p = tables.params
    if t < -1e-9 or (assignment.Tr > 0 and t > assignment.Tr + 1e-9):
        raise ValueError(f"t={t} outside [0, {assignment.Tr}]")
    if others is None:
        traj = assignment.n_trajectories
        if traj is None:
            raise ValueError("assignment has no trajectories; pass the other vehicles' states")
        others = traj.state_at(traj.times[0] + t)
    others = np.asarray(others, dtype=float)
    x_o = np.asarray(x_o, dtype=float)
    if len(others):
        values = _pc_values(tables, x_o, others)
        inside = np.flatnonzero(values <= tables.K)
        if inside.size:
            j = inside[0] if inside.size == 1 else int(np.argmin(values))
            return avoid_control(tables, x_o, others[j])
    sets = assignment.sets
    if assignment.guarantee == BRS_MINUS_CLEAR and sets is not None and sets.brs_minus is not None:
        brs = sets.brs_minus
        delta = 0.5 * cell_slack(brs.grid)
        if brs.grid.contains(x_o):
            # Frames are sparse in time; blend the two around t.
            i, j, w = brs.bracket(t)
            a, b = brs.frame(i), brs.frame(j)
            value = (1 - w) * interpolate(a, x_o) + w * interpolate(b, x_o)
            if value <= delta:
                grad = (1 - w) * np.asarray(gradient(a, x_o)) + w * np.asarray(gradient(b, x_o))
                return dyn.opt_control_free(x_o, grad, p)
    return goal_controller(x_o, assignment.goal, p)


# --- monitors and events --------------------------------------------------------


def buffer_monitor(states, tables: PairwiseTables, active=None) -> list[tuple[int, int]]:
    """Ordered pairs (i, j) whose relative state lies in the buffer set {v_exit <= 0}."""
    n = len(states)
    active = [True] * n if active is None else list(active)
    hits = []
    for i, j in itertools.permutations(range(n), 2):
        if active[i] and active[j] and exit_value(tables, states[i], states[j]) <= 0.0:
            hits.append((i, j))
    return hits


EVENT_TYPES = ("stage", "conflict_edge", "outsider_claim", "buffer_hit", "removal")


@dataclass
class EventLog:
    """Append-only event list serialised as JSON lines {time, type, payload}."""

    events: list = field(default_factory=list)

    def emit(self, time: float, kind: str, **payload) -> None:
        if kind not in EVENT_TYPES:
            raise ValueError(f"unknown event type {kind!r}")
        self.events.append({"time": round(float(time), 9), "type": kind, "payload": payload})

    def of_type(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["type"] == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)
