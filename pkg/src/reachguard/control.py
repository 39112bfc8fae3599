"""Nominal vehicle controllers: goal pursuit and reference tracking."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from reachguard.dynamics import Control, DubinsParams
from reachguard.grid import wrap_angle

HEADING_GAIN = 2.0
LOOKAHEAD_STEPS = 3


class Goal(NamedTuple):
    x: float
    y: float
    radius: float = 0.5

    def reached(self, s) -> bool:
        return bool(np.hypot(s[0] - self.x, s[1] - self.y) <= self.radius)


def goal_controller(s, goal, p: DubinsParams, gain: float = HEADING_GAIN) -> Control:
    """Proportional heading law toward a planar goal point, saturated at the turn bound."""
    bearing = np.arctan2(goal[1] - s[1], goal[0] - s[0])
    err = float(wrap_angle(bearing - s[2]))
    return Control(float(np.clip(gain * err, -p.max_turn, p.max_turn)))


def trajectory_tracker(times, path, s, t: float, p: DubinsParams, dt: float) -> Control:
    """Pure pursuit on the reference point ``LOOKAHEAD_STEPS * dt`` ahead of ``t``.

    ``path`` is (T, 3) sampled on ``times``. Positive omega turns left, so a
    vehicle to the right of its reference steers left and vice versa.
    """
    times = np.asarray(times, dtype=float)
    if t < times[0] - 1e-9 or t > times[-1] + 1e-9:
        raise ValueError(f"t={t} outside reference span [{times[0]}, {times[-1]}]")
    tq = min(t + LOOKAHEAD_STEPS * dt, times[-1])
    ref = np.array([np.interp(tq, times, path[:, k]) for k in range(2)])
    d = ref - np.asarray(s[:2], dtype=float)
    L = float(np.hypot(*d))
    if L < 1e-9:
        return Control(0.0)
    alpha = float(wrap_angle(np.arctan2(d[1], d[0]) - s[2]))
    return Control(float(np.clip(2.0 * p.speed * np.sin(alpha) / L, -p.max_turn, p.max_turn)))
