"""Rectangular grids and implicit-surface value functions.

A set is stored as a scalar field sampled on a grid; the set is the closed
sub-zero level set of that field. Union and intersection are pointwise
min/max. Storage is row-major over dimensions in declaration order.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

FRAME_CACHE = 4


class GridMismatchError(ValueError):
    """Two value functions live on different grids."""


class OutOfDomainError(ValueError):
    """A query point falls outside a non-periodic grid dimension."""


def wrap_angle(theta):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Grid:
    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    node_counts: tuple[int, ...]
    periodic: tuple[bool, ...] = ()
    _axes: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        mins = tuple(float(m) for m in self.mins)
        maxs = tuple(float(m) for m in self.maxs)
        counts = tuple(int(n) for n in self.node_counts)
        periodic = tuple(bool(p) for p in self.periodic) or (False,) * len(mins)
        if not (len(mins) == len(maxs) == len(counts) == len(periodic)):
            raise ValueError("mins, maxs, node_counts and periodic must have equal length")
        if not mins:
            raise ValueError("grid needs at least one dimension")
        for k, (lo, hi, n) in enumerate(zip(mins, maxs, counts)):
            if not lo < hi:
                raise ValueError(f"dim {k}: min {lo} must be < max {hi}")
            if n < 3:
                raise ValueError(f"dim {k}: need at least 3 nodes, got {n}")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "node_counts", counts)
        object.__setattr__(self, "periodic", periodic)
        axes = []
        for lo, hi, n, per in zip(mins, maxs, counts, periodic):
            if per:
                axes.append(lo + (hi - lo) / n * np.arange(n))
            else:
                axes.append(np.linspace(lo, hi, n))
        for ax in axes:
            ax.setflags(write=False)
        object.__setattr__(self, "_axes", tuple(axes))

    @property
    def ndim(self) -> int:
        return len(self.mins)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.node_counts

    @property
    def size(self) -> int:
        return int(np.prod(self.node_counts))

    @property
    def dx(self) -> np.ndarray:
        return np.array(
            [
                (hi - lo) / (n if per else n - 1)
                for lo, hi, n, per in zip(self.mins, self.maxs, self.node_counts, self.periodic)
            ]
        )

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return self._axes

    def states(self) -> tuple[np.ndarray, ...]:
        """Per-dimension coordinate arrays broadcast to the full grid shape."""
        return tuple(np.meshgrid(*self._axes, indexing="ij"))

    def points(self) -> np.ndarray:
        """All nodes as an (size, ndim) array in storage order."""
        return np.stack([s.ravel() for s in self.states()], axis=-1)

    def cell_index(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Lower-corner indices and fractional offsets for query points.

        ``x`` has shape (..., ndim). Periodic coordinates are wrapped; a
        non-periodic coordinate outside [min, max] raises OutOfDomainError.
        """
        x = np.asarray(x, dtype=float)
        idx = np.empty(x.shape, dtype=np.intp)
        frac = np.empty(x.shape, dtype=float)
        dx = self.dx
        for k in range(self.ndim):
            u = (x[..., k] - self.mins[k]) / dx[k]
            n = self.node_counts[k]
            if self.periodic[k]:
                u = np.mod(u, n)
                i = np.floor(u)
                f = u - i
                i = i.astype(np.intp) % n
            else:
                tol = 1e-9 * n
                if np.any(u < -tol) or np.any(u > n - 1 + tol) or np.any(np.isnan(u)):
                    raise OutOfDomainError(f"query outside grid along dim {k}")
                u = np.clip(u, 0.0, n - 1)
                i = np.minimum(np.floor(u), n - 2)
                f = u - i
                i = i.astype(np.intp)
            idx[..., k] = i
            frac[..., k] = f
        return idx, frac

    def contains(self, x) -> np.ndarray:
        """True where the non-periodic coordinates of ``x`` lie inside the box."""
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape[:-1], dtype=bool)
        for k in range(self.ndim):
            if not self.periodic[k]:
                ok &= (x[..., k] >= self.mins[k]) & (x[..., k] <= self.maxs[k])
        return ok


def _check_data(grid: Grid, data) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    if data.size != grid.size:
        raise ValueError(f"data has {data.size} entries, grid has {grid.size} nodes")
    data = data.reshape(grid.shape)
    if not np.all(np.isfinite(data)):
        raise ValueError("value function data must be finite")
    return data


@dataclass(frozen=True)
class ValueFunction:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = _check_data(self.grid, self.data)
        if data is self.data:
            data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def member(self) -> np.ndarray:
        return self.data <= 0.0

    def node_gradients(self, padded: bool = False) -> tuple[np.ndarray, ...]:
        cached = self.__dict__.get("_node_grads")
        if cached is None:
            grads = tuple(node_gradient(self.grid, self.data))
            cached = (grads, tuple(pad_periodic(self.grid, g) for g in grads))
            object.__setattr__(self, "_node_grads", cached)
        return cached[1] if padded else cached[0]

    def padded(self) -> np.ndarray:
        """Node data with the periodic seam duplicated (interpolation layout)."""
        cached = self.__dict__.get("_padded")
        if cached is None:
            cached = pad_periodic(self.grid, self.data)
            object.__setattr__(self, "_padded", cached)
        return cached

    def __call__(self, x, fill_value: float | None = None):
        return interpolate(self, x, fill_value=fill_value)


@dataclass(frozen=True)
class TimeIndexedValueFunction:
    """A family of value functions on one grid, sampled at increasing times."""

    grid: Grid
    times: np.ndarray
    data: np.ndarray  # shape (len(times), *grid.shape)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        if times.size == 0:
            raise ValueError("need at least one frame")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        data = np.asarray(self.data, dtype=float)
        if data.shape != (times.size, *self.grid.shape):
            raise ValueError(f"frame stack shape {data.shape} does not match {times.size} x {self.grid.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("value function data must be finite")
        if data is self.data:
            data = data.copy()
        data.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_frames(cls, times: Sequence[float], frames: Sequence[ValueFunction]) -> TimeIndexedValueFunction:
        grid = frames[0].grid
        for f in frames:
            if f.grid != grid:
                raise GridMismatchError("all frames must share one grid")
        return cls(grid, np.asarray(times, dtype=float), np.stack([f.data for f in frames]))

    @classmethod
    def constant(cls, v: ValueFunction, times: Sequence[float] = (0.0,)) -> TimeIndexedValueFunction:
        return cls(v.grid, np.asarray(times, dtype=float), np.broadcast_to(v.data, (len(times), *v.grid.shape)))

    def __len__(self) -> int:
        return self.times.size

    def frame(self, i: int) -> ValueFunction:
        # A few recent frames are kept so their interpolation caches survive.
        cache = self.__dict__.setdefault("_recent", OrderedDict())
        i = int(i) % len(self)
        v = cache.get(i)
        if v is None:
            v = ValueFunction(self.grid, self.data[i])
            cache[i] = v
            if len(cache) > FRAME_CACHE:
                cache.popitem(last=False)
        else:
            cache.move_to_end(i)
        return v

    @property
    def frames(self) -> list[ValueFunction]:
        return [self.frame(i) for i in range(len(self))]

    def index_at_or_after(self, t: float) -> int:
        """Index of the earliest frame with time >= t, clamped to the last frame."""
        i = int(np.searchsorted(self.times, t - 1e-12, side="left"))
        return min(i, len(self) - 1)

    def index_at_or_before(self, t: float) -> int:
        """Index of the latest frame with time <= t, clamped to the first frame."""
        i = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        return max(i, 0)

    def bracket(self, t: float) -> tuple[int, int, float]:
        """Frames (i, j) around t and the weight of j for linear blending; clamped at the ends."""
        j = self.index_at_or_after(t)
        i = self.index_at_or_before(t)
        if i >= j:
            return i, i, 0.0
        return i, j, float((t - self.times[i]) / (self.times[j] - self.times[i]))

    def at(self, t: float, rule: str = "after") -> ValueFunction:
        """Piecewise-constant frame lookup ('after' for backward solves, 'before' otherwise)."""
        i = self.index_at_or_after(t) if rule == "after" else self.index_at_or_before(t)
        return self.frame(i)


def make_signed_distance_disk(grid: Grid, center, radius: float, position_dims=(0, 1)) -> ValueFunction:
    """Planar distance to ``center`` minus ``radius``; a cylinder through other dims."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    a, b = (int(d) for d in position_dims)
    if a == b or not (0 <= a < grid.ndim and 0 <= b < grid.ndim):
        raise ValueError(f"invalid position dims {position_dims}")
    if grid.periodic[a] or grid.periodic[b]:
        raise ValueError("position dims must be non-periodic")
    states = grid.states()
    data = np.hypot(states[a] - center[0], states[b] - center[1]) - radius
    return ValueFunction(grid, data)


def _same_grid(a: ValueFunction, b: ValueFunction) -> None:
    if a.grid != b.grid:
        raise GridMismatchError("value functions are defined on different grids")


def set_union(a: ValueFunction, b: ValueFunction) -> ValueFunction:
    _same_grid(a, b)
    return ValueFunction(a.grid, np.minimum(a.data, b.data))


def set_intersect(a: ValueFunction, b: ValueFunction) -> ValueFunction:
    _same_grid(a, b)
    return ValueFunction(a.grid, np.maximum(a.data, b.data))


def pad_periodic(grid: Grid, data: np.ndarray) -> np.ndarray:
    """Append the first slab along every periodic dim so interpolation can cross the seam."""
    for k in range(grid.ndim):
        if grid.periodic[k]:
            data = np.concatenate([data, np.take(data, [0], axis=k)], axis=k)
    return data


def _fractional_index(grid: Grid, x: np.ndarray) -> np.ndarray:
    """(ndim, npts) fractional node coordinates; periodic dims wrapped into [0, n)."""
    pts = x.reshape(-1, grid.ndim)
    coords = np.empty((grid.ndim, pts.shape[0]))
    dx = grid.dx
    for k in range(grid.ndim):
        u = (pts[:, k] - grid.mins[k]) / dx[k]
        n = grid.node_counts[k]
        if grid.periodic[k]:
            u = np.mod(u, n)
            u[u >= n] = 0.0
        else:
            tol = 1e-9 * n
            if np.any(u < -tol) or np.any(u > n - 1 + tol) or np.any(np.isnan(u)):
                raise OutOfDomainError(f"query outside grid along dim {k}")
            u = np.clip(u, 0.0, n - 1)
        coords[k] = u
    return coords


def _multilinear(grid: Grid, padded: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of periodic-padded node data at points x (..., ndim)."""
    coords = _fractional_index(grid, x)
    out = map_coordinates(padded, coords, order=1, mode="nearest")
    return out.reshape(x.shape[:-1])


def interpolate(v: ValueFunction, x, fill_value: float | None = None):
    """Evaluate ``v`` at point(s) ``x`` by multilinear interpolation.

    ``x`` is a vector of length ndim or an array (..., ndim). Points outside a
    non-periodic bound raise OutOfDomainError unless ``fill_value`` is given,
    in which case they evaluate to it.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    pts = x[None, :] if scalar else x
    if pts.shape[-1] != v.grid.ndim:
        raise ValueError(f"expected points of dimension {v.grid.ndim}")
    if fill_value is None:
        out = _multilinear(v.grid, v.padded(), pts)
    else:
        inside = v.grid.contains(pts)
        out = np.full(pts.shape[:-1], float(fill_value))
        if np.any(inside):
            out[inside] = _multilinear(v.grid, v.padded(), pts[inside])
    return float(out[0]) if scalar else out


def node_gradient(grid: Grid, data: np.ndarray) -> list[np.ndarray]:
    """Central differences at every node; one-sided at non-periodic edges, wrapped at periodic ones."""
    dx = grid.dx
    grads = []
    for k in range(grid.ndim):
        if grid.periodic[k]:
            g = (np.roll(data, -1, axis=k) - np.roll(data, 1, axis=k)) / (2.0 * dx[k])
        else:
            g = np.gradient(data, dx[k], axis=k, edge_order=1)
        grads.append(g)
    return grads


def gradient(v: ValueFunction, x, fill_value: float | None = None):
    """Spatial gradient of ``v`` at ``x``: node central differences, interpolated per component."""
    x = np.asarray(x, dtype=float)
    pts = x[None, :] if x.ndim == 1 else x
    grads = v.node_gradients(padded=True)
    if fill_value is None:
        comps = [_multilinear(v.grid, g, pts) for g in grads]
    else:
        inside = v.grid.contains(pts)
        comps = []
        for g in grads:
            c = np.full(pts.shape[:-1], float(fill_value))
            if np.any(inside):
                c[inside] = _multilinear(v.grid, g, pts[inside])
            comps.append(c)
    if x.ndim == 1:
        return np.array([c[0] for c in comps])
    return np.stack(comps, axis=-1)
