"""Run configuration: grids, solver settings and directories, read from YAML.

Keys (all optional):

    params: {speed, max_turn}
    Rc, Te, K
    grids:
      relative: {extent, nodes: [nx, ny, nth]}
      outsider: {margin, nodes: [nx, ny, nth]}
      frs: {horizon, pad, nodes: [nx, ny, nth], frame_step}
    solver: {cfl, convergence_tol, max_steps}
    scenario, out, cache, jobs, seed
"""

from __future__ import annotations

import os
from importlib import resources
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from reachguard.dynamics import DubinsParams
from reachguard.grid import Grid
from reachguard.hj_solver import SolveConfig

CACHE_ENV = "REACHGUARD_CACHE"
MIN_NODES = 11


class ConfigError(ValueError):
    pass


def _nodes(v, name) -> tuple[int, int, int]:
    v = tuple(int(n) for n in v)
    if len(v) != 3:
        raise ConfigError(f"{name}: need three node counts")
    if min(v) < MIN_NODES:
        raise ConfigError(f"{name}: node counts must be at least {MIN_NODES}")
    return v


@dataclass(frozen=True)
class GridSpecs:
    relative_extent: float = 15.0
    relative_nodes: tuple[int, int, int] = (61, 61, 45)
    outsider_margin: float = 10.0
    outsider_nodes: tuple[int, int, int] = (81, 81, 45)
    frs_horizon: float = 20.0
    frs_pad: float = 6.0
    frs_nodes: tuple[int, int, int] = (105, 105, 45)
    frs_frame_step: float = 0.25

    def relative(self) -> Grid:
        e = self.relative_extent
        return Grid((-e, -e, -np.pi), (e, e, np.pi), self.relative_nodes, (False, False, True))

    def frs(self) -> Grid:
        e = self.frs_horizon + self.frs_pad
        return Grid((-e, -e, -np.pi), (e, e, np.pi), self.frs_nodes, (False, False, True))

    def outsider(self, bbox) -> Grid:
        x0, x1, y0, y1 = bbox
        m = self.outsider_margin
        return Grid((x0 - m, y0 - m, -np.pi), (x1 + m, y1 + m, np.pi), self.outsider_nodes, (False, False, True))


@dataclass(frozen=True)
class Config:
    params: DubinsParams = DubinsParams()
    Rc: float = 3.0
    Te: float = 2.0
    K: float = 2.0
    grids: GridSpecs = GridSpecs()
    solver: SolveConfig = SolveConfig()
    scenario: Path | None = None
    out: Path = Path("out")
    cache: Path = Path(".reachguard-cache")
    jobs: int = 1
    seed: int = 0
    source: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.Rc > 0 and self.Te > 0 and self.K > 0):
            raise ConfigError("Rc, Te and K must be positive")
        if self.grids.relative_extent <= self.Rc:
            raise ConfigError("relative grid must strictly contain the danger disk")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")

    def cache_dir(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        return Path(env) if env else self.cache


def load_config(path=None, **overrides) -> Config:
    """Config from a YAML file (or defaults), then non-None keyword overrides."""
    d = {}
    if path is not None:
        d = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a mapping")
    cfg = from_dict(d, Path(path) if path is not None else None)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    for k in ("scenario", "out", "cache"):
        if k in overrides:
            overrides[k] = Path(overrides[k])
    return replace(cfg, **overrides)


def from_dict(d: dict, source: Path | None = None) -> Config:
    known = {"params", "Rc", "Te", "K", "grids", "solver", "scenario", "out", "cache", "jobs", "seed"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
    base = source.parent if source is not None else Path(".")
    p = d.get("params", {})
    g = d.get("grids", {})
    rel, out, frs = g.get("relative", {}), g.get("outsider", {}), g.get("frs", {})
    dflt = GridSpecs()
    grids = GridSpecs(
        relative_extent=float(rel.get("extent", dflt.relative_extent)),
        relative_nodes=_nodes(rel.get("nodes", dflt.relative_nodes), "grids.relative"),
        outsider_margin=float(out.get("margin", dflt.outsider_margin)),
        outsider_nodes=_nodes(out.get("nodes", dflt.outsider_nodes), "grids.outsider"),
        frs_horizon=float(frs.get("horizon", dflt.frs_horizon)),
        frs_pad=float(frs.get("pad", dflt.frs_pad)),
        frs_nodes=_nodes(frs.get("nodes", dflt.frs_nodes), "grids.frs"),
        frs_frame_step=float(frs.get("frame_step", dflt.frs_frame_step)),
    )
    s = d.get("solver", {})
    solver = SolveConfig(
        cfl=float(s.get("cfl", 0.5)),
        convergence_tol=float(s.get("convergence_tol", 1e-3)),
        max_steps=int(s.get("max_steps", 20000)),
    )

    def path(key, default=None):
        v = d.get(key)
        return default if v is None else base / v

    return Config(
        params=DubinsParams(float(p.get("speed", 1.0)), float(p.get("max_turn", 1.0))),
        Rc=float(d.get("Rc", 3.0)),
        Te=float(d.get("Te", 2.0)),
        K=float(d.get("K", 2.0)),
        grids=grids,
        solver=solver,
        scenario=path("scenario"),
        out=path("out", Path("out")),
        cache=path("cache", Path(".reachguard-cache")),
        jobs=int(d.get("jobs", 1)),
        seed=int(d.get("seed", 0)),
        source=source,
    )


def load_scenario_dict(path) -> dict:
    d = yaml.safe_load(Path(path).read_text())
    if not d:
        raise ConfigError(f"{path}: empty scenario")
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return d


def fixture_path(name: str) -> Path:
    """Path of a bundled scenario fixture, by file stem."""
    p = Path(str(resources.files("reachguard") / "fixtures" / f"{name}.yaml"))
    if not p.exists():
        raise ConfigError(f"no fixture named {name!r}")
    return p
