"""Closed-loop scenario runner for the staged N+1 avoidance framework."""

from __future__ import annotations

import io
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from reachguard import dynamics as dyn
from reachguard.control import Goal, goal_controller, trajectory_tracker
from reachguard.dynamics import Control, DubinsParams, DubinsState
from reachguard.hybrid import (
    Clocks,
    EventLog,
    OutsiderAssignment,
    OutsiderConfig,
    ProtocolError,
    Stage,
    StageKind,
    assess_outsider,
    avoid_control,
    buffer_monitor,
    conflict_graph,
    conflict_size,
    outsider_control,
    pick_outsider,
    priority_controls,
    stage_transition,
)
from reachguard.reach_sets import OutsiderSets, PairwiseTables, TrajectorySet, pcs_membership

__all__ = ["Scenario", "VehicleSpec", "RunRecord", "run_scenario", "goal_controller", "trajectory_tracker"]

log = logging.getLogger(__name__)

ACTIVE, CAPTURED, EXITING, REMOVED = "active", "captured", "exiting", "removed"

# Re-evaluation delay when the N-vehicle algorithm fails to produce a plan.
RETRY_AFTER = 1.0


@dataclass(frozen=True)
class VehicleSpec:
    initial: DubinsState
    goal: Goal


@dataclass(frozen=True)
class Scenario:
    vehicles: tuple[VehicleSpec, ...]
    params: DubinsParams = DubinsParams()
    Rc: float = 3.0
    Te: float = 2.0
    K: float = 2.0
    dt: float = 0.05
    horizon: float = 60.0
    seed: int = 0
    N: int | None = None  # size of the N-vehicle set; defaults to max(2, vehicle count - 1)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        if len(self.vehicles) < 2:
            raise ValueError("a scenario needs at least two vehicles")
        if not (self.dt > 0 and self.horizon > 0):
            raise ValueError("dt and horizon must be positive")
        guard = 0.1 * min(1.0 / self.params.max_turn, self.Rc / self.params.speed)
        if self.dt > guard + 1e-12:
            raise ValueError(f"dt={self.dt} exceeds resolution guard {guard}")
        for v in self.vehicles:
            if not v.goal.radius > 0:
                raise ValueError("capture radius must be positive")
        if self.n_avoid < 2:
            raise ValueError("N must be at least 2")

    @property
    def n_avoid(self) -> int:
        return max(2, len(self.vehicles) - 1) if self.N is None else int(self.N)

    @property
    def goals(self) -> list[Goal]:
        return [v.goal for v in self.vehicles]

    def bounding_box(self) -> tuple[float, float, float, float]:
        xs = [v.initial.px for v in self.vehicles] + [v.goal.x for v in self.vehicles]
        ys = [v.initial.py for v in self.vehicles] + [v.goal.y for v in self.vehicles]
        return min(xs), max(xs), min(ys), max(ys)

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        if not d or not d.get("vehicles"):
            raise ValueError("scenario has no vehicles")
        vehicles = []
        for v in d["vehicles"]:
            px, py, th = v["initial"]
            gx, gy = v["goal"][:2]
            vehicles.append(VehicleSpec(DubinsState.make(px, py, th), Goal(float(gx), float(gy), float(v.get("capture_radius", 0.5)))))
        p = d.get("params", {})
        return cls(
            tuple(vehicles),
            DubinsParams(float(p.get("speed", 1.0)), float(p.get("max_turn", 1.0))),
            Rc=float(d.get("Rc", 3.0)),
            Te=float(d.get("Te", 2.0)),
            K=float(d.get("K", 2.0)),
            dt=float(d.get("dt", 0.05)),
            horizon=float(d.get("horizon", 60.0)),
            seed=int(d.get("seed", 0)),
            N=d.get("N"),
            name=str(d.get("name", "")),
        )


@dataclass
class RunRecord:
    times: np.ndarray
    states: np.ndarray  # (n, T, 3)
    stages: list[int]
    edges: list[frozenset]
    status: list[list[str]]  # per step, per vehicle
    events: EventLog
    min_separation: float
    violation: dict | None = None
    goals_reached: list[bool] = field(default_factory=list)
    # Sets of the first outsider claim that produced them (kept for export).
    first_sets: OutsiderSets | None = None

    @property
    def stages_entered(self) -> list[int]:
        return sorted(set(self.stages))

    def claims(self) -> list[dict]:
        return [e["payload"] | {"time": e["time"]} for e in self.events.of_type("outsider_claim")]

    def to_csv(self) -> str:
        n = self.states.shape[0]
        cols = ["time", "stage"]
        for i in range(n):
            cols += [f"v{i}_px", f"v{i}_py", f"v{i}_theta", f"v{i}_status"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for k, t in enumerate(self.times):
            row = [f"{t:.6f}", str(self.stages[k])]
            for i in range(n):
                px, py, th = self.states[i, k]
                row += [f"{px:.12g}", f"{py:.12g}", f"{th:.12g}", self.status[k][i]]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"steps: {len(self.times)}  final time: {self.times[-1]:.2f}",
            "stages entered: " + ", ".join(str(s) for s in self.stages_entered),
        ]
        for c in self.claims():
            lines.append(f"outsider: vehicle {c['vehicle']} at t={c['time']:.2f} ({c['guarantee']}, Tr={c['Tr']:.2f})")
        if not self.claims():
            lines.append("outsider: none")
        for e in self.events.of_type("removal"):
            lines.append(f"removed: vehicle {e['payload']['vehicle']} at t={e['time']:.2f}")
        lines.append(f"min separation: {self.min_separation:.4f}")
        lines.append(f"goals reached: {sum(self.goals_reached)}/{len(self.goals_reached)}")
        if self.violation:
            v = self.violation
            lines.append(f"VIOLATION: vehicles {v['pair']} at t={v['time']:.2f} (separation {v['separation']:.4f})")
        return "\n".join(lines) + "\n"


def min_pairwise_separation(states: np.ndarray, status) -> tuple[float, tuple | None]:
    """Smallest planar distance between two active vehicles at one step."""
    best, pair = np.inf, None
    for i, j in itertools.combinations(range(len(states)), 2):
        if status[i] == ACTIVE and status[j] == ACTIVE:
            d = float(np.hypot(states[i][0] - states[j][0], states[i][1] - states[j][1]))
            if d < best:
                best, pair = d, (i, j)
    return best, pair


def separation_profile(record: RunRecord) -> np.ndarray:
    """Per-step minimum active-pair separation recomputed from stored paths."""
    return np.array(
        [min_pairwise_separation(record.states[:, k], record.status[k])[0] for k in range(len(record.times))]
    )


def best_effort_control(tables: PairwiseTables, x, others, goal: Goal) -> Control:
    """Avoid the most threatening vehicle whose conflict set contains x, else pursue the goal."""
    values = [pcs_membership(tables, x, xj)[1] for xj in others]
    if values and min(values) <= tables.K:
        return avoid_control(tables, x, others[int(np.argmin(values))])
    return goal_controller(x, goal, tables.params)


@dataclass
class _Episode:
    t0: float
    Tr: float
    members: tuple[int, ...]
    plan: TrajectorySet | None
    assignment: OutsiderAssignment | None

    @property
    def end(self) -> float:
        return self.t0 + self.Tr


def _plan_members(members, x, goals, tables, ocfg):
    try:
        res = ocfg.handle_n([x[i] for i in members], [goals[i] for i in members], tables, tables.params, ocfg.dt, ids=members)
        return res.Tr, res.trajectories
    except ProtocolError as err:
        log.info("N-vehicle plan failed: %s", err)
        return RETRY_AFTER, None


def _start_episode(kind, t, x, status, graph, goals, tables, ocfg, events) -> _Episode:
    n = len(x)
    active = [s == ACTIVE for s in status]
    if kind == StageKind.STAGE1:
        members = tuple(graph.members())
        outsiders = [i for i in range(n) if active[i] and i not in members]
        assignment = None
        if len(outsiders) == 1:
            o = outsiders[0]
            try:
                assignment = assess_outsider(o, x, goals, tables, tables.params, ocfg, active)
            except ProtocolError as err:
                log.info("stage 1 plan failed: %s", err)
        if assignment is not None:
            ep = _Episode(t, assignment.Tr, members, assignment.n_trajectories, assignment)
        else:
            Tr, plan = _plan_members(members, x, goals, tables, ocfg)
            ep = _Episode(t, Tr, members, plan, None)
    else:
        assignment = pick_outsider(x, goals, tables, tables.params, ocfg, active, graph)
        members = tuple(i for i in range(n) if active[i] and i != assignment.outsider_index)
        if assignment.n_trajectories is not None:
            ep = _Episode(t, assignment.Tr, members, assignment.n_trajectories, assignment)
        else:
            ep = _Episode(t, RETRY_AFTER, members, None, assignment)
    if ep.assignment is not None:
        a = ep.assignment
        events.emit(t, "outsider_claim", vehicle=a.outsider_index, guarantee=a.guarantee, Tr=round(ep.Tr, 9), stage=int(kind))
    return ep


def _controls(t, x, status, stage, episode, goals, tables, dt) -> np.ndarray:
    n = len(x)
    p = tables.params
    active = [s == ACTIVE for s in status]
    omega = priority_controls(x, goals, tables, active)
    if episode is not None:
        tau = t - episode.t0
        a = episode.assignment
        if episode.plan is not None:
            for row, i in enumerate(episode.plan.vehicle_ids):
                if active[i]:
                    omega[i] = trajectory_tracker(episode.plan.times, episode.plan.states[row], x[i], min(tau, episode.plan.times[-1]), p, dt).omega
        if a is not None and active[a.outsider_index]:
            o = a.outsider_index
            if episode.plan is not None:
                omega[o] = outsider_control(a, x[o], min(tau, a.Tr), tables).omega
            else:
                others = [x[i] for i in episode.members if active[i]]
                omega[o] = best_effort_control(tables, x[o], others, goals[o]).omega
    for i in range(n):
        if status[i] == EXITING:
            others = [x[j] for j in range(n) if active[j]]
            omega[i] = best_effort_control(tables, x[i], others, goals[i]).omega
    return omega


def run_scenario(sc: Scenario, tables: PairwiseTables, ocfg: OutsiderConfig) -> RunRecord:
    """Simulate a scenario under the staged controller.

    Each step: goal captures and scheduled removals, conflict graph, buffer
    monitor, stage update, controls, explicit midpoint integration. A vehicle
    hitting a buffer set in stage 2 exits: for Te it keeps avoiding but no
    longer counts as a conflict or separation participant, then it is removed.
    """
    if tables.params != sc.params:
        raise ValueError("tables were computed for different vehicle parameters")
    if abs(tables.Rc - sc.Rc) > 1e-12 or abs(tables.Te - sc.Te) > 1e-12:
        raise ValueError("tables were computed for a different Rc or Te")
    if abs(ocfg.dt - sc.dt) > 1e-12:
        raise ValueError("outsider config dt differs from scenario dt")
    tables = tables.with_threshold(sc.K)
    n, N, dt = len(sc.vehicles), sc.n_avoid, sc.dt
    goals = sc.goals
    x = np.array([v.initial.as_array() for v in sc.vehicles])
    status = [ACTIVE] * n
    events = EventLog()
    stage, episode = Stage(), None
    exit_started: dict[int, float] = {}
    prev_edges: frozenset = frozenset()
    reported_hits: set = set()
    first_sets = None

    times, paths, stages, edge_log, status_log = [], [], [], [], []
    min_sep, violation = np.inf, None
    steps = int(round(sc.horizon / dt))
    for k in range(steps + 1):
        t = k * dt
        for i in range(n):
            if status[i] == ACTIVE and goals[i].reached(x[i]):
                status[i] = CAPTURED
            if status[i] == EXITING and t >= exit_started[i] + sc.Te - 1e-9:
                status[i] = REMOVED
                events.emit(t, "removal", vehicle=i, exit_started=round(exit_started[i], 9))
        active = [s == ACTIVE for s in status]

        g = conflict_graph(x, tables, active)
        for e in sorted(g.edges - prev_edges):
            events.emit(t, "conflict_edge", edge=list(e), change="added")
        for e in sorted(prev_edges - g.edges):
            events.emit(t, "conflict_edge", edge=list(e), change="removed")
        prev_edges = g.edges

        hits = buffer_monitor(x, tables, active)
        for h in hits:
            key = tuple(sorted(h))
            if key not in reported_hits:
                reported_hits.add(key)
                events.emit(t, "buffer_hit", pair=list(key))
        reported_hits &= {tuple(sorted(h)) for h in hits}

        outsider = None
        if stage.kind == StageKind.STAGE2 and episode is not None and episode.assignment is not None:
            outsider = episode.assignment.outsider_index
        buffer_hit = outsider is not None and any(outsider in h for h in hits)
        clocks = Clocks(t, None if episode is None else episode.end)
        new = stage_transition_logged(stage, g, N, clocks, buffer_hit, events)
        if new != stage:
            if new.kind == StageKind.STAGE3:
                status[outsider] = EXITING
                exit_started[outsider] = t
                active[outsider] = False
            elif new.kind in (StageKind.STAGE1, StageKind.STAGE2):
                episode = _start_episode(new.kind, t, x, status, g, goals, tables, ocfg, events)
                if first_sets is None and episode.assignment is not None:
                    first_sets = episode.assignment.sets
            elif new.kind == StageKind.STAGE0:
                episode = None
            stage = new
        if episode is not None and t >= episode.end - 1e-9 and stage.kind == StageKind.STAGE3:
            episode = None

        sep, pair = min_pairwise_separation(x, status)
        if sep < min_sep:
            min_sep = sep
        if sep <= sc.Rc and violation is None:
            violation = {"time": t, "pair": list(pair), "separation": sep}
        times.append(t)
        paths.append(x.copy())
        stages.append(int(stage.kind))
        edge_log.append(g.edges)
        status_log.append(list(status))
        if k == steps or not any(st in (ACTIVE, EXITING) for st in status):
            break

        omega = _controls(t, x, status, stage, episode, goals, tables, dt)
        moving = [s in (ACTIVE, EXITING) for s in status]
        x = np.array([dyn.step_dubins(x[i], omega[i], dt, sc.params) if moving[i] else x[i] for i in range(n)])

    reached = [any(s[i] == CAPTURED for s in status_log) for i in range(n)]
    return RunRecord(
        np.array(times),
        np.stack(paths, axis=1),
        stages,
        edge_log,
        status_log,
        events,
        float(min_sep),
        violation,
        reached,
        first_sets,
    )


def stage_transition_logged(stage, g, N, clocks, buffer_hit, events) -> Stage:
    new = stage_transition(stage, g, N, clocks, buffer_hit)
    if new != stage:
        events.emit(clocks.t, "stage", previous=int(stage.kind), stage=int(new.kind), conflict_size=conflict_size(g))
    return new
