import numpy as np
import pytest

from reachguard import dynamics as dyn
from reachguard.control import LOOKAHEAD_STEPS, Goal, goal_controller, trajectory_tracker

P = dyn.DubinsParams()


def test_goal_controller_examples():
    assert goal_controller((0, 0, 0), Goal(10, 0), P).omega == 0.0
    assert abs(goal_controller((0, 0, 0), Goal(-10, 0), P).omega) == P.max_turn
    assert goal_controller((0, 0, 0), Goal(0, 10), P).omega == P.max_turn
    assert goal_controller((0, 0, 0), Goal(10, -0.5), P).omega < 0


def test_goal_reached_within_time_bound():
    s, goal, dt = (0.0, 0.0, 0.0), Goal(10, 0), 0.05
    for k in range(int(10.5 / dt) + 1):
        if goal.reached(s):
            break
        s = dyn.step_dubins(s, goal_controller(s, goal, P).omega, dt, P)
    assert goal.reached(s) and k * dt <= 10.5


def arc(dt=0.05, T=10.0):
    times = np.arange(0.0, T + 1e-9, dt)
    path, s = [], (0.0, 0.0, 0.0)
    for t in times:
        path.append(s)
        s = dyn.step_dubins(s, 0.3 * np.sin(0.5 * t), dt, P)
    return times, np.array(path)


def test_tracker_on_reference_is_quiet():
    times, path = arc()
    u = trajectory_tracker(times, path, path[0], 0.0, P, 0.05)
    assert abs(u.omega) <= 2.0 * LOOKAHEAD_STEPS * 0.05


def test_tracker_steers_toward_path():
    times, path = arc()
    left = (0.0, 0.5, 0.0)
    right = (0.0, -0.5, 0.0)
    assert trajectory_tracker(times, path, left, 0.0, P, 0.05).omega < 0
    assert trajectory_tracker(times, path, right, 0.0, P, 0.05).omega > 0
    with pytest.raises(ValueError):
        trajectory_tracker(times, path, left, 11.0, P, 0.05)


def test_self_tracking_stays_on_reference():
    dt = 0.05
    times, path = arc(dt)
    s = path[0]
    worst = 0.0
    for k, t in enumerate(times[:-1]):
        s = dyn.step_dubins(s, trajectory_tracker(times, path, s, t, P, dt).omega, dt, P)
        worst = max(worst, float(np.min(np.hypot(path[:, 0] - s[0], path[:, 1] - s[1]))))
    assert worst < 0.1
