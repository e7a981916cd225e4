"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 safety violation
detected, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import scenarios, sim
from .core import SingularMatrixError
from .filters import validity_scan
from .tracking import (
    ConditionRow,
    condition_rows_to_csv,
    rom_issf_scan,
    safety_condition_check,
    tracking_bound_fit,
)

EXIT_OK, EXIT_USAGE, EXIT_UNSAFE, EXIT_DIVERGED = 0, 1, 2, 3
OUTPUT_ENV = "ROMCBF_OUTPUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def write_atomic(path: Path, text: str) -> Path:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _output_dir(args) -> Path:
    return Path(args.output or os.environ.get(OUTPUT_ENV) or "romcbf_out")


def _assignments(args, name):
    items = []
    if args.config:
        try:
            items += scenarios.load_config(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    for text in args.set or []:
        lhs = text.split("=", 1)[0]
        items.append(scenarios.parse_assignment(text if "." in lhs else f"{name}.{text}"))
    return items


def _build(args, extra=None):
    name = args.scenario
    params, simcfg = scenarios.resolve_overrides(name, _assignments(args, name))
    params.update(extra or {})
    if args.dt is not None:
        simcfg["dt"] = args.dt
    if args.horizon is not None:
        simcfg["horizon"] = args.horizon
    return scenarios.build(name, params, simcfg)


def _parse_grid(specs):
    grid = []
    for spec in specs or []:
        if "=" not in spec:
            raise UsageError(f"grid spec {spec!r} must look like key=v1,v2,...")
        key, values = spec.split("=", 1)
        grid.append((key.strip(), [scenarios._parse_value(v) for v in values.split(",") if v.strip()]))
    return grid


def _maybe_plot(args, kind, *payload):
    if not args.plot:
        return
    try:
        from . import plotting
    except ImportError as exc:
        raise UsageError(f"--plot needs matplotlib (pip install romcbf[plot]): {exc}") from exc
    getattr(plotting, kind)(*payload)


def _summary(sc, report, traj=None) -> str:
    parts = [f"scenario={sc.name}", f"min_h={report.min_h:.6g}", f"min_h0={report.min_h0:.6g}",
             f"argmin_t={report.argmin_time:.6g}", f"violated={int(report.violated)}",
             f"diverged={int(report.diverged)}"]
    if traj is not None and traj.events:
        parts.append(f"events={len(traj.events)}")
    return " ".join(parts)


def cmd_list(args) -> int:
    for name in scenarios.list_scenarios():
        print(name)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _build(args)
    x0 = None
    if args.x0:
        x0 = np.array([float(v) for v in args.x0.split(",")])
    traj = sim.integrate(sc, x0)
    out = _output_dir(args) / f"{sc.name}.csv"
    write_atomic(out, traj.to_csv())
    report = sim.monitor(traj, sc.tol_inv)
    print(_summary(sc, report, traj))
    for t, tag in traj.events:
        print(f"event t={t:.6g} {tag}", file=sys.stderr)
    _maybe_plot(args, "plot_trajectory", traj, out.with_suffix(".png"), sc.name)
    if traj.diverged:
        print(f"{sc.name}: integration diverged", file=sys.stderr)
        return EXIT_DIVERGED
    if report.violated:
        print(f"{sc.name}: invariance violated at t={report.argmin_time:.6g}, "
              f"state={np.array2string(report.argmin_state, precision=6)}", file=sys.stderr)
        return EXIT_UNSAFE
    return EXIT_OK


def _sweep_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "min_h", "min_h0", "violated", "diverged"])
    for i, row in enumerate(report.per_ic):
        w.writerow([i, _fmt(row["min_h"]), _fmt(row["min_h0"]), int(row["violated"]), int(row["diverged"])])
    return buf.getvalue()


def _rom_scan_csv(rep) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = rep.states.shape[1]
    w.writerow([f"q_{i}" for i in range(n)] + ["margin", "violation"])
    viol = rep.violation_mask
    for k in range(len(rep.states)):
        w.writerow([_fmt(v) for v in rep.states[k]] + [_fmt(rep.margin[k]), int(viol[k])])
    return buf.getvalue()


def cmd_verify(args) -> int:
    sc = _build(args)
    out_dir = _output_dir(args)
    unsafe = False
    if sc.cbf is not None:
        scan_fn = sc.extras.get("scan_samples")
        if scan_fn is not None:
            rep = validity_scan(sc.system, sc.cbf, samples=scan_fn(args.seed), tol_lgh=args.tol_lgh)
        elif sc.box is not None:
            rep = validity_scan(sc.system, sc.cbf, sc.box, args.n_samples, tol_lgh=args.tol_lgh, seed=args.seed)
        else:
            rep = None
        if rep is not None:
            write_atomic(out_dir / f"{sc.name}_validity.csv", rep.to_csv())
            print(f"validity scenario={sc.name} samples={len(rep.states)} on_lgh_zero={int(rep.zero_mask.sum())} "
                  f"violations={rep.n_violations} min_margin={rep.min_margin:.6g} "
                  f"min_band_margin={rep.min_band_margin:.6g}")
            if rep.n_violations:
                unsafe = True
                print(f"{sc.name}: validity violated; witness state "
                      f"{np.array2string(rep.violating_states[0], precision=6)} "
                      f"margin={rep.margin[rep.violation_mask][0]:.6g}", file=sys.stderr)
            _maybe_plot(args, "plot_validity", rep, out_dir / f"{sc.name}_validity.png", sc.name)
    spec = sc.extras.get("spec")
    if spec is not None:
        rom = rom_issf_scan(spec, sc.extras["rom_box"], args.n_samples, seed=args.seed)
        write_atomic(out_dir / f"{sc.name}_rom_issf.csv", _rom_scan_csv(rom))
        print(f"rom_issf scenario={sc.name} violations={rom.n_violations} min_margin={rom.min_margin:.6g}")
        unsafe |= rom.n_violations > 0
    scan_unsafe = unsafe
    if sc.sampler is not None and args.n_ics > 0:
        with np.errstate(all="ignore"):
            report, _ = sim.sweep(sc, args.n_ics, seed=args.seed)
        write_atomic(out_dir / f"{sc.name}_sweep.csv", _sweep_csv(report))
        print("sweep " + _summary(sc, report))
    else:
        traj = sim.integrate(sc)
        report = sim.monitor(traj, sc.tol_inv)
        write_atomic(out_dir / f"{sc.name}.csv", traj.to_csv())
        print("run " + _summary(sc, report, traj))
    if scan_unsafe:
        return EXIT_UNSAFE
    if report.diverged:
        return EXIT_DIVERGED
    return EXIT_UNSAFE if report.violated else EXIT_OK


def _condition_row(sc, traj, min_h0) -> ConditionRow:
    P = sc.params
    fit = tracking_bound_fit(traj, sc.extras["k0"], sc.extras["n_q"])
    chk = safety_condition_check(P["alpha"], P["epsilon"], P["mu"], fit.gamma)
    return ConditionRow(P["alpha"], P["epsilon"], P["mu"], fit.gamma, chk.margin, min_h0 >= -sc.tol_inv, min_h0)


def cmd_sweep(args) -> int:
    grid = _parse_grid(args.grid)
    keys = [k for k, _ in grid]
    cells = list(itertools.product(*[v for _, v in grid])) or [()]
    rows = []
    any_unsafe = any_div = False
    tracking = None
    for cell in cells:
        sc = _build(args, dict(zip(keys, cell)))
        if tracking is None:
            tracking = "spec" in sc.extras
        if args.n_ics > 0 and sc.sampler is not None:
            report, _ = sim.sweep(sc, args.n_ics, seed=args.seed)
            traj = None
        else:
            traj = sim.integrate(sc)
            report = sim.monitor(traj, sc.tol_inv)
        any_unsafe |= report.violated
        any_div |= report.diverged
        if tracking and traj is not None:
            rows.append((cell, _condition_row(sc, traj, report.min_h0)))
        else:
            rows.append((cell, report))
        print(" ".join(f"{k}={v}" for k, v in zip(keys, cell)) + " " + _summary(sc, report), flush=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if tracking and all(isinstance(r, ConditionRow) for _, r in rows):
        body = condition_rows_to_csv([r for _, r in rows]).splitlines()
        cols = body[0].split(",")
        extra = [i for i, k in enumerate(keys) if k not in cols]
        w.writerow([keys[i] for i in extra] + cols)
        for (cell, _), line in zip(rows, body[1:]):
            w.writerow([str(cell[i]) for i in extra] + line.split(","))
    else:
        w.writerow(keys + ["min_h", "min_h0", "violated", "diverged"])
        for cell, r in rows:
            w.writerow([str(v) for v in cell] + [_fmt(r.min_h), _fmt(r.min_h0), int(r.violated), int(r.diverged)])
    out = _output_dir(args) / f"{args.scenario}_sweep_grid.csv"
    write_atomic(out, buf.getvalue())
    if any_div:
        return EXIT_DIVERGED
    return EXIT_UNSAFE if any_unsafe and args.strict else EXIT_OK


def cmd_levelset(args) -> int:
    grid = _parse_grid(args.grid)
    keys = [k for k, _ in grid]
    cells = list(itertools.product(*[v for _, v in grid])) or [()]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + ["x", "v", "h"])
    for cell in cells:
        sc = _build(args, dict(zip(keys, cell)))
        box = sc.extras.get("levelset_box")
        if box is None or sc.h is None or sc.system.n != 2:
            raise UsageError(f"scenario {sc.name!r} has no two-dimensional level set to export")
        from .core import grid_box
        X = grid_box(box, args.grid_size)
        H = np.asarray(sc.h(X)) if sc.vectorized else np.array([float(sc.h(x)) for x in X])
        for x, h in zip(X, H):
            w.writerow([str(v) for v in cell] + [_fmt(x[0]), _fmt(x[1]), _fmt(h)])
    out = _output_dir(args) / f"{args.scenario}_levelset.csv"
    write_atomic(out, buf.getvalue())
    print(f"levelset scenario={args.scenario} cells={len(cells)} points={args.grid_size ** 2} file={out}")
    _maybe_plot(args, "plot_levelset", out, out.with_suffix(".png"), args.scenario, keys)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="romcbf", description="Reduced-order-model control barrier functions")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("list", help="list registered scenarios")

    def common(sp):
        sp.add_argument("--scenario", required=True)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="parameter override, repeatable; applied after --config, last wins")
        sp.add_argument("--config", help="config file with 'section.key = value' lines")
        sp.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ENV} or ./romcbf_out)")
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--horizon", type=float)
        sp.add_argument("--plot", action="store_true", help="also render PNG figures (needs matplotlib)")

    s = sub.add_parser("simulate", help="simulate one initial condition and write the trajectory CSV")
    common(s)
    s.add_argument("--x0", help="comma-separated initial state")
    v = sub.add_parser("verify", help="validity scan plus invariance sweep")
    common(v)
    v.add_argument("--n-samples", type=int, default=10_000)
    v.add_argument("--n-ics", type=int, default=20)
    v.add_argument("--tol-lgh", type=float, default=1e-8)
    w = sub.add_parser("sweep", help="parameter grid, one summary row per cell")
    common(w)
    w.add_argument("--grid", action="append", metavar="KEY=V1,V2,...")
    w.add_argument("--n-ics", type=int, default=0)
    w.add_argument("--strict", action="store_true", help="exit 2 if any cell is unsafe")
    ls = sub.add_parser("levelset", help="barrier values on a grid for contour plots")
    common(ls)
    ls.add_argument("--grid", action="append", metavar="KEY=V1,V2,...")
    ls.add_argument("--grid-size", type=int, default=201)
    return p


COMMANDS = {"list": cmd_list, "simulate": cmd_simulate, "verify": cmd_verify,
            "sweep": cmd_sweep, "levelset": cmd_levelset}


def run(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"romcbf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (scenarios.UnknownScenarioError, scenarios.ConfigError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        print(f"romcbf: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularMatrixError, FloatingPointError, OverflowError) as exc:
        print(f"romcbf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
