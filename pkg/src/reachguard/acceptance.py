"""Acceptance suite: nine numbered checks shared by ``reachguard verify`` and the tests.

Each check returns a Result with a measured value, the bound it is held to and
the wall time. A Context carries the loaded tables and memoises fixture runs so
the closed-loop checks share simulations.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from reachguard import dynamics as dyn
from reachguard.config import Config, fixture_path, load_scenario_dict
from reachguard.control import Goal
from reachguard.grid import Grid, TimeIndexedValueFunction, ValueFunction, interpolate
from reachguard.hj_solver import HamiltonianSpec, solve_brs_time_varying
from reachguard.hybrid import BRS_MINUS_CLEAR, FRS_CLEAR, UNGUARANTEED, OutsiderAssignment, handle_n, outsider_control
from reachguard.precompute import TableFile, ensure_tables, outsider_config
from reachguard.reach_sets import (
    OutsiderFrs,
    OutsiderSets,
    PairwiseTables,
    TrajectorySet,
    cell_slack,
    compute_brs_minus,
    compute_our,
    frs_intersects_our,
)
from reachguard.sim import RunRecord, Scenario, run_scenario, separation_profile

CONTROL_SAMPLES = 101
PRECOMPUTE_BUDGET = 600.0  # seconds per table


@dataclass(frozen=True)
class Result:
    number: int
    name: str
    measured: str
    bound: str
    passed: bool
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number}. {self.name}: {self.measured} (bound: {self.bound}) [{self.seconds:.1f} s]"


@dataclass
class Context:
    cfg: Config
    tables: PairwiseTables
    frs: TimeIndexedValueFunction
    precompute: list[TableFile]
    runs: dict = field(default_factory=dict)

    @classmethod
    def load(cls, cfg: Config) -> Context:
        tables, frs, report = ensure_tables(cfg)
        return cls(cfg, tables, frs, report)

    def scenario(self, name: str) -> Scenario:
        return Scenario.from_dict(load_scenario_dict(fixture_path(name)))

    def simulate(self, name: str) -> RunRecord:
        sc = self.scenario(name)
        return run_scenario(sc, self.tables, outsider_config(self.cfg, sc, self.frs))

    def run(self, name: str) -> RunRecord:
        if name not in self.runs:
            self.runs[name] = self.simulate(name)
        return self.runs[name]


def _timed(number, name, fn):
    t0 = time.perf_counter()
    measured, bound, passed = fn()
    return Result(number, name, measured, bound, bool(passed), time.perf_counter() - t0)


# --- 1. Hamiltonians against brute-force control grids ---------------------------


def brute_force_hamiltonians(r: np.ndarray, lam: np.ndarray, p: dyn.DubinsParams, n: int = CONTROL_SAMPLES):
    """(pc, exit, frs) Hamiltonians by enumerating n-point turn-rate grids.

    r and lam are (m, 3). The relative flow is written out here rather than
    taken from the dynamics module so the two stay independent.
    """
    v, wb = p.speed, p.max_turn
    w = np.linspace(-wb, wb, n)
    x, y, th = (r[:, k, None, None] for k in range(3))
    l1, l2, l3 = (lam[:, k, None, None] for k in range(3))
    wi, wj = w[None, :, None], w[None, None, :]
    dot = l1 * (-v + v * np.cos(th) + wi * y) + l2 * (v * np.sin(th) - wi * x) + l3 * (wj - wi)
    pc = dot.min(axis=2).max(axis=1)
    ex = dot.min(axis=(1, 2))
    fr = (l1[:, :, 0] * v * np.cos(th[:, :, 0]) + l2[:, :, 0] * v * np.sin(th[:, :, 0]) + l3[:, :, 0] * w[None, :]).max(axis=1)
    return pc, ex, fr


def check_hamiltonians(ctx: Context, samples: int = 1000) -> Result:
    def run():
        p = ctx.cfg.params
        rng = np.random.default_rng(ctx.cfg.seed + 1)
        r = np.column_stack([rng.uniform(-15, 15, samples), rng.uniform(-15, 15, samples), rng.uniform(-np.pi, np.pi, samples)])
        lam = rng.normal(size=(samples, 3))
        pc, ex, fr = brute_force_hamiltonians(r, lam, p)
        rt, lt = r.T, lam.T
        # Grid-resolution slack: one control step times the control coefficients.
        step = 2.0 * p.max_turn / (CONTROL_SAMPLES - 1)
        slack = 1e-6 + step * (np.abs(dyn.switching_pc(rt, lt)) + np.abs(lt[2]))
        errs = {
            "pc": np.abs(dyn.ham_pc(rt, lt, p) - pc),
            "exit": np.abs(dyn.ham_exit(rt, lt, p) - ex),
            "frs": np.abs(dyn.ham_frs_dubins(rt, lt, p) - fr),
        }
        ok = all(np.all(e <= slack) for e in errs.values())
        measured = ", ".join(f"{k} max err {e.max():.2e}" for k, e in errs.items()) + f" over {samples} samples"
        return measured, "1e-6 + one control step x coefficients", ok

    res = _timed(1, "Hamiltonian oracle equivalence", run)
    return _with_budget(res, 10.0)


def _with_budget(res: Result, budget: float) -> Result:
    return replace(res, bound=f"{res.bound}; < {budget:g} s", passed=res.passed and res.seconds < budget)


# --- 2. one-dimensional advection ---------------------------------------------------


def advection_boundary_error(n: int, speed: float = 1.0, horizon: float = 1.0) -> tuple[float, float]:
    """Boundary error of the backward set of {|x| <= 0.5} under x' = -speed.

    The target is the smooth x^2 - 0.25 so the scheme's smearing shows up; the
    exact right boundary after ``horizon`` is 0.5 + speed * horizon.
    """
    g = Grid((-3.0,), (3.0,), (n,))
    (x,) = g.states()
    target = TimeIndexedValueFunction.constant(ValueFunction(g, x**2 - 0.25))
    ham = HamiltonianSpec(lambda s, lam, t: -speed * lam[0], [speed])
    v = solve_brs_time_varying(g, target, ham, 0.0, horizon, output_times=[0.0]).frame(0).data
    k = np.flatnonzero((v[:-1] <= 0) & (v[1:] > 0))[-1]
    dx = float(g.dx[0])
    xb = x[k] + dx * v[k] / (v[k] - v[k + 1])
    return abs(xb - (0.5 + speed * horizon)), dx


def check_advection(ctx: Context) -> Result:
    def run():
        e1, dx1 = advection_boundary_error(201)
        e2, _ = advection_boundary_error(401)
        ratio = e1 / e2 if e2 > 0 else np.inf
        measured = f"error {e1:.4f} ({e1 / dx1:.2f} cells) at 201 nodes, {e2:.4f} at 401, ratio {ratio:.2f}"
        return measured, "<= 2 cells, ratio >= 1.5", e1 <= 2 * dx1 and ratio >= 1.5

    return _with_budget(_timed(2, "1-D advection sanity", run), 5.0)


# --- 3. FRS against random-control rollouts ----------------------------------------


def random_rollouts(p: dyn.DubinsParams, n: int, horizon: float, rng, dt: float = 0.01, segments: int = 10) -> np.ndarray:
    """End poses from (0, 0, 0) under piecewise-constant random turn rates.

    Half the segments draw from the interval, half from its endpoints, so
    hard turns (the FRS boundary) are represented.
    """
    steps = int(round(horizon / dt))
    per = max(1, steps // segments)
    ends = np.zeros((n, 3))
    for k in range(n):
        s = dyn.DubinsState(0.0, 0.0, 0.0)
        for i in range(steps):
            if i % per == 0:
                if rng.random() < 0.5:
                    w = rng.uniform(-p.max_turn, p.max_turn)
                else:
                    w = p.max_turn * rng.choice([-1.0, 1.0])
            s = dyn.step_dubins(s, w, dt, p)
        ends[k] = s
    return ends


def check_frs(ctx: Context, t: float = 1.0, samples: int = 500) -> Result:
    def run():
        p = ctx.cfg.params
        frame = ctx.frs.at(t, rule="after")
        ends = random_rollouts(p, samples, t, np.random.default_rng(ctx.cfg.seed + 3))
        inside = interpolate(frame, ends, fill_value=np.inf) <= 0.0
        frac = float(np.mean(inside))
        g = frame.grid
        x, y, _ = g.states()
        member = frame.data <= 0.0
        rmax = float(np.max(np.hypot(x, y)[member])) if member.any() else 0.0
        limit = p.speed * t + 2.0 * max(g.dx[0], g.dx[1])
        measured = f"contains {100 * frac:.1f}% of {samples} endpoints, max radius {rmax:.3f}"
        return measured, f">= 99%, radius <= {limit:.3f}", frac >= 0.99 and rmax <= limit

    # A table solved in this session counts toward the runtime.
    res = _timed(3, "FRS physicality", run)
    solve = [r.seconds for r in ctx.precompute if r.name == "frs" and not r.hit]
    if solve:
        res = replace(res, seconds=res.seconds + solve[0])
    return _with_budget(res, 120.0)


# --- 4. danger disk within buffer within conflict set ------------------------------


def containment_violations(tables: PairwiseTables, slack: float = 1e-9) -> dict:
    g = tables.grid
    x, y, _ = g.states()
    disk = np.hypot(x, y) <= tables.Rc
    buffer = tables.v_exit.data <= 0.0
    return {
        "disk_not_in_buffer": int(np.sum(disk & (tables.v_exit.data > slack))),
        "buffer_not_in_pcs": int(np.sum(buffer & (tables.v_pc.data > tables.K + slack))),
        "disk_nodes": int(disk.sum()),
    }


def pcs_touches_boundary(tables: PairwiseTables) -> int:
    """Planar-boundary nodes of the relative grid inside {v_pc <= K}."""
    d = tables.v_pc.data <= tables.K
    edge = np.zeros_like(d)
    edge[0], edge[-1], edge[:, 0], edge[:, -1] = True, True, True, True
    return int(np.sum(d & edge))


def check_containment(ctx: Context) -> Result:
    def run():
        v = containment_violations(ctx.tables)
        edge = pcs_touches_boundary(ctx.tables)
        ok = v["disk_not_in_buffer"] == 0 and v["buffer_not_in_pcs"] == 0 and edge == 0 and ctx.tables.converged
        measured = (
            f"{v['disk_not_in_buffer']} disk nodes outside buffer, {v['buffer_not_in_pcs']} buffer nodes outside PCS, "
            f"{edge} PCS nodes on grid edge, converged={ctx.tables.converged}"
        )
        return measured, "all 0, slack 1e-9", ok

    res = _timed(4, "Buffer/conflict containment", run)
    solve = [r.seconds for r in ctx.precompute if r.name == "v_exit+v_pc" and not r.hit]
    if solve:
        res = replace(res, seconds=res.seconds + solve[0])
    return _with_budget(res, PRECOMPUTE_BUDGET)


# --- 5. FRS/OUR intersection against an exhaustive loop ----------------------------


def exhaustive_first_hit(frs: TimeIndexedValueFunction, our: TimeIndexedValueFunction) -> float | None:
    """First time on the merged time list at which some node is in both sets."""

    def before(tv, t):
        i = 0
        for k, s in enumerate(tv.times):
            if s <= t + 1e-12:
                i = k
        return tv.data[i]

    for t in sorted(set(frs.times.tolist()) | set(our.times.tolist())):
        a, b = before(frs, t), before(our, t)
        for idx in np.ndindex(a.shape):
            if a[idx] <= 0.0 and b[idx] <= 0.0:
                return float(t)
    return None


def random_intersection_case(ctx: Context, rng, grid: Grid):
    """A small random OUR from straight-line vehicles and a randomly placed FRS."""
    p = ctx.cfg.params
    n = int(rng.integers(2, 4))
    horizon = float(rng.uniform(1.0, 4.0))
    times = np.arange(0.0, horizon + 1e-9, 0.05)
    start = np.column_stack([rng.uniform(-5, 5, n), rng.uniform(-5, 5, n), rng.uniform(-np.pi, np.pi, n)])
    paths = np.empty((n, times.size, 3))
    for i in range(n):
        s = dyn.DubinsState(*start[i])
        for k in range(times.size):
            paths[i, k] = s
            s = dyn.step_dubins(s, 0.0, 0.05, p)
    our = compute_our(ctx.tables, TrajectorySet(times, paths, tuple(range(n))), grid, stride=int(rng.integers(2, 7)))
    seed = (rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-np.pi, np.pi))
    frs_times = np.arange(0.0, min(horizon, ctx.frs.times[-1]) + 1e-9, float(rng.choice([0.25, 0.5])))
    frs = OutsiderFrs(ctx.frs, dyn.DubinsState.make(*seed)).on_grid(grid, frs_times)
    return frs, our


def check_intersection(ctx: Context, cases: int = 24) -> Result:
    def run():
        rng = np.random.default_rng(ctx.cfg.seed + 5)
        grid = Grid((-12.0, -12.0, -np.pi), (12.0, 12.0, np.pi), (25, 25, 12), (False, False, True))
        mismatches, hits = 0, 0
        for _ in range(cases):
            frs, our = random_intersection_case(ctx, rng, grid)
            fast, slow = frs_intersects_our(frs, our), exhaustive_first_hit(frs, our)
            hits += slow is not None
            if (fast is None) != (slow is None) or (fast is not None and fast != slow):
                mismatches += 1
        return f"{mismatches} mismatches over {cases} cases ({hits} hit, {cases - hits} clear)", "0 mismatches, >= 20 cases", mismatches == 0 and cases >= 20

    return _timed(5, "FRS/OUR intersection equivalence", run)


# --- 6. closed loop outside the minimal BRS -----------------------------------------


def plan_grid(ctx: Context, traj: TrajectorySet) -> Grid:
    pts = traj.states.reshape(-1, 3)
    m = ctx.cfg.grids.outsider_margin
    lo, hi = pts[:, :2].min(axis=0) - m, pts[:, :2].max(axis=0) + m
    return Grid((lo[0], lo[1], -np.pi), (hi[0], hi[1], np.pi), ctx.cfg.grids.outsider_nodes, (False, False, True))


def outsider_rollouts(ctx: Context, rollouts: int = 200, near: float = 3.0) -> dict:
    """Closed-loop outsider runs from outside the minimal BRS of a fixed N-vehicle plan."""
    sc = ctx.scenario("outsider_plan")
    p, dt = sc.params, sc.dt
    states = [v.initial.as_array() for v in sc.vehicles]
    res = handle_n(states, sc.goals, ctx.tables, p, dt)
    grid = plan_grid(ctx, res.trajectories)
    our = compute_our(ctx.tables, res.trajectories, grid)
    brs = compute_brs_minus(our, res.trajectories, ctx.tables, p, res.Tr, ctx.cfg.solver)
    eps = cell_slack(grid)
    v0 = brs.data[0].ravel()
    pts = grid.points()
    interior = grid.contains(pts) & (np.abs(pts[:, 0] - grid.mins[0]) > 1) & (np.abs(pts[:, 0] - grid.maxs[0]) > 1)
    near_idx = np.flatnonzero((v0 > 0) & (v0 < near) & interior)
    far_idx = np.flatnonzero((v0 > 0) & interior)
    rng = np.random.default_rng(ctx.cfg.seed + 6)
    # Three quarters of the starts hug the set boundary, where a miss would show.
    starts = np.concatenate([rng.choice(near_idx, 3 * rollouts // 4), rng.choice(far_idx, rollouts - 3 * rollouts // 4)])
    steps = int(round(res.Tr / dt))
    worst, violations, entered = np.inf, 0, 0
    sets = OutsiderSets(our, None, res.Tr, brs, None)
    for idx in starts:
        goal = Goal(*rng.uniform(-20, 20, 2))
        a = OutsiderAssignment(len(states), res.Tr, res.trajectories, sets, BRS_MINUS_CLEAR, goal)
        x = pts[idx].copy()
        low = np.inf
        for k in range(steps + 1):
            t = k * dt
            low = min(low, float(interpolate(our.at(t, rule="after"), x, fill_value=np.inf)))
            if k == steps:
                break
            x = np.array(dyn.step_dubins(x, outsider_control(a, x, t, ctx.tables).omega, dt, p))
        worst = min(worst, low)
        violations += low <= -eps
        entered += low <= 0.0
    return {"Tr": res.Tr, "eps": eps, "violations": violations, "entered": entered, "worst": worst, "rollouts": len(starts)}


def check_closed_loop(ctx: Context) -> Result:
    def run():
        r = outsider_rollouts(ctx)
        measured = (
            f"{r['violations']} of {r['rollouts']} rollouts reached our <= -{r['eps']:.3f} "
            f"(Tr {r['Tr']:.2f} s, min our {r['worst']:.3f}, {r['entered']} touched our <= 0)"
        )
        return measured, "0 violations", r["violations"] == 0

    return _timed(6, "Minimal-BRS closed loop", run)


# --- 7. separation on the guaranteed fixtures ---------------------------------------


def check_guaranteed_runs(ctx: Context) -> Result:
    def run():
        parts, ok = [], True
        for name, stage in (("stage1", 1), ("stage2", 2)):
            rec = ctx.run(name)
            rc = ctx.scenario(name).Rc
            guaranteed = [c for c in rec.claims() if c["guarantee"] in (FRS_CLEAR, BRS_MINUS_CLEAR)]
            ok = ok and stage in rec.stages_entered and bool(guaranteed) and rec.violation is None and rec.min_separation > rc
            parts.append(
                f"{name}: stage {stage} {'entered' if stage in rec.stages_entered else 'missing'}, "
                f"{len(guaranteed)}/{len(rec.claims())} guaranteed claims, min sep {rec.min_separation:.3f}"
            )
        return "; ".join(parts), "stage entered, a guaranteed claim, min separation > Rc", ok

    return _timed(7, "Guaranteed-run separation monitor", run)


# --- 8. forced exit --------------------------------------------------------------


def remaining_separation(rec: RunRecord, after: float) -> float:
    """Smallest active-pair separation from ``after`` on, as the run's monitor counts it.

    Exiting, removed and captured vehicles are out of the airspace picture.
    """
    prof = separation_profile(rec)
    return float(np.min(prof[rec.times >= after - 1e-9]))


def check_forced_exit(ctx: Context) -> Result:
    def run():
        rec = ctx.run("stage3_buffer")
        sc = ctx.scenario("stage3_buffer")
        entry = [e["time"] for e in rec.events.of_type("stage") if e["payload"]["stage"] == 3]
        removals = rec.events.of_type("removal")
        claims = rec.claims()
        if not entry or not removals:
            return f"stage 3 {'entered' if entry else 'not entered'}, {len(removals)} removals", "stage 3 and a removal", False
        t3 = entry[0]
        gone = removals[0]["payload"]["vehicle"]
        delay = removals[0]["time"] - t3
        sep = remaining_separation(rec, t3)
        unguaranteed = bool(claims) and claims[0]["guarantee"] == UNGUARANTEED
        ok = unguaranteed and delay <= sc.Te + 1e-9 and sep > sc.Rc
        measured = (
            f"claim {claims[0]['guarantee'] if claims else 'none'}, stage 3 at t={t3:.2f}, vehicle {gone} removed "
            f"after {delay:.2f} s, remaining min sep {sep:.3f}"
        )
        return measured, f"unguaranteed claim, removal <= Te={sc.Te:g} s, separation > Rc={sc.Rc:g}", ok

    return _timed(8, "Forced-exit monitor", run)


# --- 9. determinism ---------------------------------------------------------------


def check_determinism(ctx: Context) -> Result:
    def run():
        first = ctx.run("stage1")
        again = ctx.simulate("stage1")
        csv_same = first.to_csv() == again.to_csv()
        log_same = first.events.to_jsonl() == again.events.to_jsonl()
        a = check_intersection(ctx, cases=6).measured
        b = check_intersection(ctx, cases=6).measured
        ok = csv_same and log_same and a == b
        measured = f"CSV identical={csv_same}, event log identical={log_same}, repeated randomized check identical={a == b}"
        return measured, "byte-identical", ok

    return _timed(9, "Determinism", run)


CHECKS = {
    1: check_hamiltonians,
    2: check_advection,
    3: check_frs,
    4: check_containment,
    5: check_intersection,
    6: check_closed_loop,
    7: check_guaranteed_runs,
    8: check_forced_exit,
    9: check_determinism,
}


def run_checks(ctx: Context, numbers=None, jobs: int = 1) -> list[Result]:
    numbers = sorted(CHECKS) if numbers is None else sorted(numbers)
    if jobs > 1:
        # Fixture runs are shared, so simulate them once up front.
        for name in ("stage1", "stage2", "stage3_buffer"):
            ctx.run(name)
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(lambda n: CHECKS[n](ctx), numbers))
    return [CHECKS[n](ctx) for n in numbers]


def format_table(results: list[Result]) -> str:
    rows = [("#", "criterion", "measured", "bound", "pass")]
    rows += [(str(r.number), r.name, r.measured, r.bound, "PASS" if r.passed else "FAIL") for r in results]
    widths = [max(len(row[k]) for row in rows) for k in range(4)]
    lines = []
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row[:4], widths)) + "  " + row[4])
    return "\n".join(lines) + "\n"
