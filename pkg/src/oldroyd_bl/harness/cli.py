"""Command line entry point: ``oldroyd-bl <subcommand> [options]``.

Exit status: 0 when every asserted target passes, 2 when a rate target is
missed (or a run is incomplete), 1 on a runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..composite import AsymptoticRun, assemble_composite
from ..errors import SolverError
from ..grid import Field2D, write_field
from ..outer import step_diffusive, step_limit
from ..profiles import ZGrid
from . import experiments as ex
from .config import ExperimentConfig, load_config
from .rates import RateReport
from .report import format_table, write_report

log = logging.getLogger("oldroyd_bl")

EXIT_OK, EXIT_FAILURE, EXIT_MISSED = 0, 1, 2

# subcommand -> experiment it runs (None: handled directly by the CLI)
SUBCOMMANDS = {
    "solve": None,
    "layers": None,
    "composite": None,
    "rates": "limit-rates",
    "residual": "residual-order",
    "mms": "mms",
    "scaling": "scaling-identity",
    "report": None,
}


def _solve(cfg: ExperimentConfig, threads: int, out: Path) -> RateReport:
    """Diffusive runs for every eps plus the limit run; final fields saved."""
    initial = ex.standard_initial(cfg)
    n = ex._nsteps(cfg.T, cfg.dt)

    def one(eps):
        P = cfg.params.build(eps)
        s = initial
        for _ in range(n):
            s = step_diffusive(s, P, cfg.dt) if eps > 0 else step_limit(s, P, cfg.dt)
        d = out / "fields" / f"eps_{eps:g}"
        d.mkdir(parents=True, exist_ok=True)
        for f in (s.vel.u1, s.vel.u2, s.eta, s.tau.t11, s.tau.t12, s.tau.t22, s.pressure):
            write_field(d / f.name, f)
        return ex._rel_div(s)

    eps_all = [0.0] + list(cfg.eps_list)
    report = RateReport("solve")
    report.extras = {"rel_divergence": {repr(e): v for e, v in
                                        zip(eps_all, ex._map(one, eps_all, threads))}}
    report.files = sorted(str(p) for p in (out / "fields").rglob("*") if p.is_file())
    return report


def _layers(cfg: ExperimentConfig, threads: int, out: Path) -> RateReport:
    """Full asymptotic pipeline to T; every layer profile saved."""
    run = AsymptoticRun(ex.standard_initial(cfg), cfg.params.build(0.0), cfg.dt,
                        ZGrid(cfg.layer.nz, cfg.layer.Z), enabled=cfg.terms or None)
    run.run(ex._nsteps(cfg.T, cfg.dt), every=10 ** 9)
    d = out / "layers"
    d.mkdir(parents=True, exist_ok=True)
    snap = run.snapshot()
    summary = {}
    for name in sorted(snap.layers):
        p = snap.layers[name]
        p.write(d / name)
        summary[name] = {"max_abs": float(np.max(np.abs(p.values))), "tail": p.tail}
    report = RateReport("layers")
    report.files = sorted(str(p) for p in d.rglob("*") if p.is_file())
    report.extras = {"profiles": summary, "time": snap.time}
    return report


def _composite(cfg: ExperimentConfig, threads: int, out: Path) -> RateReport:
    """Composite approximation at T for every eps, compared with the
    diffusive solution."""
    initial = ex.standard_initial(cfg)
    n = ex._nsteps(cfg.T, cfg.dt)
    run = AsymptoticRun(initial, cfg.params.build(0.0), cfg.dt,
                        ZGrid(cfg.layer.nz, cfg.layer.Z), enabled=cfg.terms or None)
    run.run(n, every=10 ** 9)
    snap = run.snapshot()

    def one(eps):
        P = cfg.params.build(eps)
        s = initial
        for _ in range(n):
            s = step_diffusive(s, P, cfg.dt)
        c = assemble_composite(snap, eps, cfg.fidelity)
        a = s.arrays()
        d = out / "composite" / f"eps_{eps:g}"
        d.mkdir(parents=True, exist_ok=True)
        for q in ("u1", "u2", "eta", "t11", "t12", "t22"):
            write_field(d / q, Field2D(c.grid, c.values[q], q, c.time))
        return {"max_error": {q: float(np.max(np.abs(a[q] - c.values[q]))) for q in a},
                "no_slip": c.wall_velocity(),
                "divergence": float(np.max(np.abs(c.divergence())))}

    report = RateReport("composite")
    report.extras = {"fidelity": cfg.fidelity,
                     "per_eps": {repr(e): r for e, r in
                                 zip(cfg.eps_list, ex._map(one, list(cfg.eps_list), threads))}}
    report.files = sorted(str(p) for p in (out / "composite").rglob("*") if p.is_file())
    return report


def _render(out: Path) -> int:
    """Print the tables of every report found under ``out``; write the
    manifest alone when there is none."""
    reports = sorted(p for p in out.glob("*.json") if p.name != "manifest.json")
    if not reports:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps({"runs": {}}, indent=1))
        print(f"no reports in {out}; wrote manifest only")
        return EXIT_OK
    status = EXIT_OK
    for p in reports:
        d = json.loads(p.read_text())
        print(f"== {d.get('experiment', p.stem)}")
        for r in d.get("rows", []):
            print(f"  {r['quantity']:<22} slope={r['slope']}  passed={r['passed']}")
        if not d.get("all_passed", True):
            status = EXIT_MISSED
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oldroyd-bl", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(SUBCOMMANDS))
    ap.add_argument("--config", help="experiment config (.toml or .json)")
    ap.add_argument("--out", help="output directory (default: config 'outputs')")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--fidelity", choices=("order2", "order3"))
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = ExperimentConfig().validate()
        if args.fidelity:
            cfg = replace(cfg, fidelity=args.fidelity)
        out = Path(args.out or cfg.outputs)
        if args.command == "report":
            return _render(out)
        t0 = time.perf_counter()
        special = {"solve": _solve, "layers": _layers, "composite": _composite}
        if args.command in special:
            report = special[args.command](cfg, args.threads, out)
            cfg = replace(cfg, experiment=args.command)
        else:
            if not (args.command == "rates" and cfg.experiment == "layer-rates"):
                cfg = replace(cfg, experiment=SUBCOMMANDS[args.command])
            report = ex.run_experiment(cfg, threads=args.threads)
        manifest = write_report(report, cfg, out, time.perf_counter() - t0, args.threads)
    except SolverError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    if report.rows:
        print(format_table(report))
    print(f"status: {manifest['status']}  ({manifest['artifacts']['report']})")
    return EXIT_OK if manifest["status"] == "pass" else EXIT_MISSED


if __name__ == "__main__":
    sys.exit(main())
