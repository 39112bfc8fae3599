"""Offline tables with content-hashed cache files.

Three tables: the Te-buffer value v_exit and the converged conflict value
v_pc on the relative grid, and the origin FRS of one vehicle. File names carry
a hash of everything that changes their contents (params, Rc, Te, grid,
solver settings); K is only a query threshold and is left out.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from reachguard import cache
from reachguard.config import Config
from reachguard.dynamics import DubinsParams
from reachguard.grid import TimeIndexedValueFunction
from reachguard.hybrid import OutsiderConfig
from reachguard.reach_sets import PairwiseTables, compute_pairwise_tables, frs_seed, solve_origin_frs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TableFile:
    name: str
    path: Path
    hit: bool
    seconds: float


def _grid_desc(g) -> dict:
    return {"mins": list(g.mins), "maxs": list(g.maxs), "nodes": list(g.node_counts), "periodic": list(g.periodic)}


def pairwise_key(cfg: Config, params: DubinsParams, Rc: float, Te: float) -> str:
    return cache.content_key(kind="pairwise", params=params, Rc=Rc, Te=Te, grid=_grid_desc(cfg.grids.relative()), solver=cfg.solver)


def frs_times(cfg: Config) -> np.ndarray:
    h, step = cfg.grids.frs_horizon, cfg.grids.frs_frame_step
    return np.union1d(np.arange(0.0, h, step), [h])


def frs_key(cfg: Config, params: DubinsParams) -> str:
    g = cfg.grids.frs()
    seed = frs_seed(g)
    return cache.content_key(
        kind="frs",
        params=params,
        grid=_grid_desc(g),
        solver=cfg.solver,
        times=frs_times(cfg),
        seed=cache.content_key(seed=seed.data),
    )


def table_paths(cfg: Config, params: DubinsParams, Rc: float, Te: float) -> dict[str, Path]:
    d = cfg.cache_dir()
    pk = pairwise_key(cfg, params, Rc, Te)
    return {
        "v_exit": d / f"v_exit-{pk}.hjrs",
        "v_pc": d / f"v_pc-{pk}.hjrs",
        "frs": d / f"frs-{frs_key(cfg, params)}.hjrs",
    }


def _solve_pairwise(cfg: Config, params: DubinsParams, Rc: float, Te: float):
    t0 = time.perf_counter()
    tables = compute_pairwise_tables(cfg.grids.relative(), params, Rc, Te, cfg.K, cfg.solver)
    return tables, time.perf_counter() - t0


def _solve_frs(cfg: Config, params: DubinsParams):
    t0 = time.perf_counter()
    frs = solve_origin_frs(cfg.grids.frs(), params, cfg.grids.frs_horizon, cfg.solver, output_times=frs_times(cfg))
    return frs, time.perf_counter() - t0


def _meta(params: DubinsParams, **extra) -> dict:
    return {"speed": params.speed, "max_turn": params.max_turn} | extra


def ensure_tables(
    cfg: Config,
    params: DubinsParams | None = None,
    Rc: float | None = None,
    Te: float | None = None,
) -> tuple[PairwiseTables, TimeIndexedValueFunction, list[TableFile]]:
    """Load the three tables from the cache, solving and writing any that are missing."""
    params = cfg.params if params is None else params
    Rc = cfg.Rc if Rc is None else Rc
    Te = cfg.Te if Te is None else Te
    paths = table_paths(cfg, params, Rc, Te)
    need_pair = not (paths["v_exit"].exists() and paths["v_pc"].exists())
    need_frs = not paths["frs"].exists()

    jobs = []
    if need_pair:
        jobs.append(("pairwise", _solve_pairwise, (cfg, params, Rc, Te)))
    if need_frs:
        jobs.append(("frs", _solve_frs, (cfg, params)))
    results = {}
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(jobs))) as ex:
            futs = {name: ex.submit(fn, *args) for name, fn, args in jobs}
            results = {name: f.result() for name, f in futs.items()}
    else:
        results = {name: fn(*args) for name, fn, args in jobs}

    report = []
    if need_pair:
        tables, secs = results["pairwise"]
        cache.write(paths["v_exit"], tables.v_exit, _meta(params, kind="v_exit", Rc=Rc, Te=Te))
        cache.write(paths["v_pc"], tables.v_pc, _meta(params, kind="v_pc", Rc=Rc, Te=Te, converged=int(tables.converged)))
        report += [TableFile("v_exit+v_pc", paths["v_pc"], False, secs)]
    if need_frs:
        frs, secs = results["frs"]
        cache.write(paths["frs"], frs, _meta(params, kind="frs", horizon=cfg.grids.frs_horizon))
        report.append(TableFile("frs", paths["frs"], False, secs))

    t0 = time.perf_counter()
    v_exit = cache.read(paths["v_exit"]).frame(0)
    v_pc = cache.read(paths["v_pc"]).frame(0)
    converged = cache.read_meta(paths["v_pc"]).get("converged", "1") == "1"
    frs = cache.read(paths["frs"])
    secs = time.perf_counter() - t0
    if not need_pair:
        report.append(TableFile("v_exit+v_pc", paths["v_pc"], True, secs))
    if not need_frs:
        report.append(TableFile("frs", paths["frs"], True, secs))
    tables = PairwiseTables(v_pc, v_exit, cfg.K, Te, Rc, params, converged)
    return tables, frs, report


def outsider_config(cfg: Config, sc, frs: TimeIndexedValueFunction | None) -> OutsiderConfig:
    """Outsider grid around the scenario plus the cached FRS table."""
    return OutsiderConfig(cfg.grids.outsider(sc.bounding_box()), frs, cfg.solver, sc.dt)
