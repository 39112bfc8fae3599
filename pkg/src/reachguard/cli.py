"""Command line: precompute tables, simulate scenarios, run the acceptance suite, export slices.

Exit codes: 0 success, 1 verification or solver failure, 2 safety-monitor
violation, 64 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from reachguard import cache
from reachguard.config import ConfigError, load_config, load_scenario_dict
from reachguard.grid import TimeIndexedValueFunction, interpolate, wrap_angle
from reachguard.hj_solver import NumericFailure

EXIT_OK, EXIT_FAIL, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("reachguard")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--cache", help="cache directory (REACHGUARD_CACHE overrides)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker count")
    common.add_argument("--seed", type=int, help="seed for randomized parts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="reachguard", description="Reachability-based collision avoidance for N+1 Dubins vehicles")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("precompute", parents=[common], help="solve and cache the offline tables")
    sim = sub.add_parser("simulate", parents=[common], help="run one scenario")
    sim.add_argument("--scenario", help="YAML scenario file")
    ver = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    ver.add_argument("--only", type=int, nargs="+", choices=range(1, 10), metavar="N", help="criteria to run")
    exp = sub.add_parser("export-slice", parents=[common], help="SVG of a zero level set at one heading")
    exp.add_argument("file", help="HJRS value-function file")
    exp.add_argument("--time", type=float, default=0.0, help="frame time")
    exp.add_argument("--theta", type=float, default=0.0, help="heading of the slice (rad)")
    return parser


def _config(args):
    cfg = load_config(args.config, cache=args.cache, out=args.out, jobs=args.jobs, seed=args.seed)
    if getattr(args, "scenario", None):
        cfg = replace(cfg, scenario=Path(args.scenario))
    return cfg


# --- precompute -------------------------------------------------------------------


def cmd_precompute(args) -> int:
    from reachguard.precompute import ensure_tables

    cfg = _config(args)
    _, _, report = ensure_tables(cfg)
    for r in report:
        state = "cache hit" if r.hit else "solved"
        print(f"{r.name:12s} {state:9s} {r.seconds:8.1f} s  {r.path}")
    return EXIT_OK


# --- simulate -----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from reachguard.precompute import ensure_tables, outsider_config
    from reachguard.sim import Scenario, run_scenario

    cfg = _config(args)
    if cfg.scenario is None:
        raise UsageError("simulate needs --scenario (or 'scenario' in the config)")
    try:
        sc = Scenario.from_dict(load_scenario_dict(cfg.scenario))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"{cfg.scenario}: {err}") from err
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    tables, frs, _ = ensure_tables(cfg, sc.params, sc.Rc, sc.Te)
    rec = run_scenario(sc, tables, outsider_config(cfg, sc, frs))

    name = sc.name or Path(cfg.scenario).stem
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.csv").write_text(rec.to_csv())
    (out / f"{name}.events.jsonl").write_text(rec.events.to_jsonl())
    (out / f"{name}.summary.txt").write_text(rec.summary())
    if rec.first_sets is not None:
        s = rec.first_sets
        cache.write(out / f"{name}.our.hjrs", s.our)
        if s.brs_minus is not None:
            cache.write(out / f"{name}.brs_minus.hjrs", s.brs_minus)
        if s.frs is not None:
            cache.write(out / f"{name}.frs.hjrs", s.frs)
    sys.stdout.write(rec.summary())
    if rec.violation:
        print(f"safety monitor violation at t={rec.violation['time']:.2f}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


# --- verify ------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from reachguard.acceptance import Context, format_table, run_checks

    cfg = _config(args)
    ctx = Context.load(cfg)
    results = run_checks(ctx, args.only, cfg.jobs)
    sys.stdout.write(format_table(results))
    out = cfg.out / "verify"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("".join(f"{r.number} {'PASS' if r.passed else 'FAIL'} {r.measured}\n" for r in results))
    for name, rec in sorted(ctx.runs.items()):
        (out / f"{name}.csv").write_text(rec.to_csv())
        (out / f"{name}.events.jsonl").write_text(rec.events.to_jsonl())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# --- export-slice --------------------------------------------------------------------


def heading_slice(tv: TimeIndexedValueFunction, t: float, theta: float):
    """Planar node coordinates and values of the frame nearest ``t`` at heading ``theta``.

    Returns (xs, ys, values (ny, nx), frame time).
    """
    g = tv.grid
    i = int(np.argmin(np.abs(tv.times - t)))
    frame = tv.frame(i)
    xs, ys = g.axes[0], g.axes[1]
    if g.ndim == 2:
        return xs, ys, frame.data.T, float(tv.times[i])
    if g.ndim != 3:
        raise UsageError("export-slice needs a 2-D or 3-D value function")
    if g.periodic[2]:
        theta = float(wrap_angle(theta))
    elif not g.mins[2] <= theta <= g.maxs[2]:
        raise UsageError(f"theta {theta} outside [{g.mins[2]}, {g.maxs[2]}]")
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, theta)], axis=-1)
    return xs, ys, interpolate(frame, pts).reshape(X.shape), float(tv.times[i])


def zero_contours(xs, ys, values) -> list[np.ndarray]:
    """Polylines of the zero level set, each (m, 2)."""
    import contourpy

    if not (values.min() <= 0.0 <= values.max()):
        return []
    gen = contourpy.contour_generator(xs, ys, values)
    return [np.asarray(line) for line in gen.lines(0.0)]


def write_slice_svg(path, xs, ys, values, title: str) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "reachguard"
    lines = zero_contours(xs, ys, values)
    fig, ax = plt.subplots(figsize=(5, 5))
    for line in lines:
        ax.plot(line[:, 0], line[:, 1], color="tab:blue", lw=1.2)
    ax.set_xlim(xs[0], xs[-1])
    ax.set_ylim(ys[0], ys[-1])
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return len(lines)


def cmd_export_slice(args) -> int:
    src = Path(args.file)
    if not src.exists():
        raise UsageError(f"{src}: no such file")
    try:
        tv = cache.read(src)
    except cache.CacheFormatError as err:
        raise UsageError(f"{src}: {err}") from err
    xs, ys, values, used = heading_slice(tv, args.time, args.theta)
    if abs(used - args.time) > 1e-9:
        print(f"warning: no frame at t={args.time:g}; using nearest frame t={used:g}", file=sys.stderr)
    out = Path(args.out) if args.out else src.with_suffix(".svg")
    if out.suffix != ".svg":
        out = out / f"{src.stem}.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_slice_svg(out, xs, ys, values, f"{src.stem}  t={used:g}  theta={args.theta:g}")
    print(f"{out}: {n} contour(s)")
    return EXIT_OK


COMMANDS = {
    "precompute": cmd_precompute,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "export-slice": cmd_export_slice,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        print(f"reachguard: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as err:
        print(f"reachguard: solver failure at step {err.step}: {err}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as err:
        print(f"reachguard: I/O error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
