import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachguard import dynamics as dyn
from reachguard.control import Goal, goal_controller
from reachguard.grid import Grid, TimeIndexedValueFunction, ValueFunction
from reachguard.hybrid import (
    BRS_MINUS_CLEAR,
    FRS_CLEAR,
    UNGUARANTEED,
    Clocks,
    ConflictGraph,
    EventLog,
    OutsiderAssignment,
    OutsiderConfig,
    Stage,
    StageKind,
    avoid_control,
    buffer_monitor,
    conflict_graph,
    conflict_size,
    handle_n,
    outsider_control,
    pick_outsider,
    stage_transition,
)
from reachguard.reach_sets import OutsiderSets, TrajectorySet, exit_value, pcs_membership

FAR = [(-40.0, -40.0, 0.0), (40.0, -40.0, 0.0), (-40.0, 40.0, 0.0), (40.0, 40.0, 0.0)]


def exhaustive_graph(states, tables):
    edges = set()
    for i, j in itertools.permutations(range(len(states)), 2):
        if pcs_membership(tables, states[i], states[j])[0]:
            edges.add(tuple(sorted((i, j))))
    return edges


def test_conflict_graph_examples(small_tables):
    g = conflict_graph(FAR, small_tables)
    assert g.edges == frozenset() and conflict_size(g) == 0
    states = list(FAR)
    states[2] = states[1]
    g = conflict_graph(states, small_tables)
    assert g.edges == {(1, 2)} and conflict_size(g) == 2
    assert conflict_graph(states, small_tables, active=[True, False, True, True]).edges == frozenset()


pose = st.tuples(st.floats(-12, 12), st.floats(-12, 12), st.floats(-np.pi, np.pi))


@settings(max_examples=30, deadline=None)
@given(states=st.lists(pose, min_size=2, max_size=5), perm_seed=st.integers(0, 1000))
def test_conflict_graph_matches_exhaustive_and_is_label_free(small_tables, states, perm_seed):
    g = conflict_graph(states, small_tables)
    assert set(g.edges) == exhaustive_graph(states, small_tables)
    perm = np.random.default_rng(perm_seed).permutation(len(states))
    assert conflict_size(conflict_graph([states[k] for k in perm], small_tables)) == conflict_size(g)


def test_conflict_size_examples():
    assert conflict_size(ConflictGraph(4)) == 0
    assert conflict_size(ConflictGraph(4, frozenset({(0, 1), (1, 2), (0, 2)}))) == 3
    assert conflict_size(ConflictGraph(4, frozenset({(0, 1), (0, 2), (0, 3)}))) == 4
    with pytest.raises(ValueError):
        ConflictGraph(3, frozenset({(1, 1)}))
    with pytest.raises(ValueError):
        ConflictGraph(3, frozenset({(0, 3)}))


def graph_of_size(n, size):
    """Star on vehicles 0..size-1 (size 1 has no edges, so conflict size 0)."""
    return ConflictGraph(n, frozenset((0, k) for k in range(1, size)))


def test_stage_transitions():
    s0 = Stage()
    assert stage_transition(s0, graph_of_size(4, 2), 3, Clocks(1.0), False) == s0
    s1 = stage_transition(s0, graph_of_size(4, 3), 3, Clocks(1.0), False)
    assert s1 == Stage(StageKind.STAGE1, 1.0)
    s2 = stage_transition(s1, graph_of_size(4, 4), 3, Clocks(2.0, 9.0), False)
    assert s2.kind == StageKind.STAGE2
    s3 = stage_transition(s2, graph_of_size(4, 4), 3, Clocks(3.0, 9.0), True)
    assert s3 == Stage(StageKind.STAGE3, 3.0)
    assert stage_transition(s3, graph_of_size(4, 0), 3, Clocks(4.0), False) is s3
    # once Tr has elapsed the stage is re-derived from the current size
    assert stage_transition(s2, graph_of_size(4, 2), 3, Clocks(9.0, 9.0), False).kind == StageKind.STAGE0
    assert stage_transition(s2, graph_of_size(4, 2), 3, Clocks(8.0, 9.0), False) == s2
    # a buffer hit outside stage 2 is not an exit trigger
    assert stage_transition(s1, graph_of_size(4, 3), 3, Clocks(3.0, 9.0), True) == s1
    # sizes beyond N+1 fall back to stage 2
    assert stage_transition(s0, graph_of_size(6, 6), 3, Clocks(0.0), False).kind == StageKind.STAGE2


def test_stage_replay_is_reproducible():
    rng = np.random.default_rng(4)
    sizes = rng.integers(0, 5, 40)
    hits = rng.random(40) < 0.1

    def replay():
        s, out = Stage(), []
        for k, (n, h) in enumerate(zip(sizes, hits)):
            s = stage_transition(s, graph_of_size(4, int(n)), 3, Clocks(0.1 * k, 2.0), bool(h))
            out.append(s)
        return out

    assert replay() == replay()


def test_handle_n_head_on(small_tables):
    p = small_tables.params
    states = [(-4.0, 0.0, 0.0), (4.0, 0.0, np.pi)]
    goals = [Goal(20.0, 0.0), Goal(-20.0, 0.0)]
    res = handle_n(states, goals, small_tables, p, 0.05)
    traj = res.trajectories
    assert 0 < res.Tr < 60 and traj.times[-1] == pytest.approx(res.Tr)
    sep = np.hypot(*(traj.states[0, :, :2] - traj.states[1, :, :2]).T)
    assert sep.min() > small_tables.Rc
    # every segment is a Dubins step under some admissible turn rate
    for i in range(2):
        for a, b in zip(traj.states[i, :-1], traj.states[i, 1:]):
            w = float(dyn.wrap_angle(b[2] - a[2])) / 0.05
            assert abs(w) <= p.max_turn + 1e-9
            assert np.allclose(dyn.step_dubins(a, w, 0.05, p), b, atol=1e-9)


def test_handle_n_degenerate(small_tables):
    res = handle_n(FAR[:3], [Goal(0, 0)] * 3, small_tables, small_tables.params, 0.05)
    assert res.Tr == 0.05
    assert np.allclose(res.trajectories.states[:, 1, 2], 0.0)
    assert np.allclose(res.trajectories.states[:, 1, 0] - res.trajectories.states[:, 0, 0], 0.05)


def test_handle_n_rejects_mismatched_params(small_tables):
    with pytest.raises(ValueError):
        handle_n(FAR[:2], [Goal(0, 0)] * 2, small_tables, dyn.DubinsParams(2.0, 1.0), 0.05)


def test_buffer_monitor(small_tables):
    assert buffer_monitor(FAR, small_tables) == []
    states = [(0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (30.0, 0.0, 0.0)]
    assert buffer_monitor(states, small_tables) == [(0, 1), (1, 0)]
    rng = np.random.default_rng(5)
    for _ in range(10):
        s = [tuple(rng.uniform(-6, 6, 2)) + (rng.uniform(-np.pi, np.pi),) for _ in range(4)]
        expected = [(i, j) for i, j in itertools.permutations(range(4), 2) if exit_value(small_tables, s[i], s[j]) <= 0]
        assert buffer_monitor(s, small_tables) == expected


def one_vehicle_assignment(xj, guarantee=FRS_CLEAR, sets=None, Tr=2.0, goal=Goal(10.0, 0.0)):
    traj = TrajectorySet(np.array([0.0, Tr]), np.array([[xj, xj]]), (1,))
    if sets is None and guarantee == FRS_CLEAR:
        g = Grid((-1.0, -1.0, -np.pi), (1.0, 1.0, np.pi), (3, 3, 4), (False, False, True))
        empty = TimeIndexedValueFunction(g, np.array([0.0]), np.ones((1, 3, 3, 4)))
        sets = OutsiderSets(empty, empty, Tr)
    return OutsiderAssignment(0, Tr, traj, sets, guarantee, goal)


def test_outsider_control_branches(small_tables):
    p = small_tables.params
    far = one_vehicle_assignment((40.0, 40.0, 0.0))
    x = (0.0, 0.0, 0.5)
    assert outsider_control(far, x, 0.5, small_tables) == goal_controller(x, far.goal, p)
    near = (4.0, 0.5, np.pi)
    a = one_vehicle_assignment(near)
    assert pcs_membership(small_tables, x, near)[0]
    assert outsider_control(a, x, 0.5, small_tables) == avoid_control(small_tables, x, near)
    with pytest.raises(ValueError):
        outsider_control(a, x, 2.5, small_tables)
    with pytest.raises(ValueError):
        outsider_control(a, x, -0.1, small_tables)


def test_outsider_control_follows_brs_gradient_on_band(small_tables):
    p = small_tables.params
    g = Grid((-5.0, -5.0, -np.pi), (5.0, 5.0, np.pi), (21, 21, 16), (False, False, True))
    _, _, th = g.states()
    # value decreasing in heading near theta = 0: the gradient law must turn left
    brs = TimeIndexedValueFunction.constant(ValueFunction(g, -0.1 * np.ones(g.shape) + 0.2 * np.sin(th)), (0.0, 2.0))
    sets = OutsiderSets(brs, None, 2.0, brs, 0.0)
    a = one_vehicle_assignment((40.0, 40.0, 0.0), BRS_MINUS_CLEAR, sets)
    assert outsider_control(a, (0.0, 0.0, 0.0), 1.0, small_tables) == dyn.opt_control_free((0, 0, 0), (0, 0, 1), p)
    away = OutsiderSets(brs, None, 2.0, TimeIndexedValueFunction.constant(ValueFunction(g, np.full(g.shape, 5.0)), (0.0, 2.0)), 0.0)
    b = one_vehicle_assignment((40.0, 40.0, 0.0), BRS_MINUS_CLEAR, away)
    assert outsider_control(b, (0.0, 0.0, 0.0), 1.0, small_tables) == goal_controller((0, 0, 0), b.goal, p)


def test_assignment_validation():
    traj = TrajectorySet(np.array([0.0, 1.0]), np.zeros((1, 2, 3)), (0,))
    with pytest.raises(ValueError):
        OutsiderAssignment(0, 1.0, traj, None, UNGUARANTEED, Goal(0, 0))
    with pytest.raises(ValueError):
        OutsiderAssignment(1, 1.0, traj, None, FRS_CLEAR, Goal(0, 0))
    with pytest.raises(ValueError):
        OutsiderAssignment(1, 1.0, traj, None, "maybe", Goal(0, 0))


def test_pick_outsider_symmetric_square_is_deterministic(small_tables):
    g = Grid((-16.0, -16.0, -np.pi), (16.0, 16.0, np.pi), (25, 25, 12), (False, False, True))
    cfg = OutsiderConfig(g, None)
    d = 3.5
    states = [(-d, -d, np.pi / 4), (d, -d, 3 * np.pi / 4), (d, d, -3 * np.pi / 4), (-d, d, -np.pi / 4)]
    goals = [Goal(12, 12), Goal(-12, 12), Goal(-12, -12), Goal(12, -12)]
    graph = conflict_graph(states, small_tables)
    degrees = {graph.degree(i) for i in range(4)}
    assert len(degrees) == 1 and conflict_size(graph) == 4
    a = pick_outsider(states, goals, small_tables, small_tables.params, cfg, graph=graph)
    b = pick_outsider(states, goals, small_tables, small_tables.params, cfg, graph=graph)
    assert a.outsider_index == b.outsider_index and a.guarantee == b.guarantee
    if a.guarantee == UNGUARANTEED:
        assert a.outsider_index == 0
    assert a.outsider_index in range(4)


def test_event_log():
    log = EventLog()
    log.emit(0.1, "stage", stage=1)
    log.emit(0.2, "removal", vehicle=3)
    with pytest.raises(ValueError):
        log.emit(0.3, "party")
    lines = [json.loads(line) for line in log.to_jsonl().splitlines()]
    assert lines == [
        {"time": 0.1, "type": "stage", "payload": {"stage": 1}},
        {"time": 0.2, "type": "removal", "payload": {"vehicle": 3}},
    ]
    assert [e["payload"] for e in log.of_type("removal")] == [{"vehicle": 3}]
