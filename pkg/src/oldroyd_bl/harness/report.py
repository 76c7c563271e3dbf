"""Report artifacts: JSON report, CSV error table, plot script, manifest."""
from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np

from .. import __version__
from .config import ExperimentConfig
from .rates import RateReport

CSV_HEADER = ("eps", "quantity", "norm", "error")

PLOT_SCRIPT = '''"""Log-log error plot for {name}; run with python3 (needs matplotlib)."""
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("{csv}")))
for q in sorted({{r["quantity"] for r in rows}}):
    pts = sorted((float(r["eps"]), float(r["error"])) for r in rows if r["quantity"] == q)
    plt.loglog(*zip(*pts), "o-", label=q)
plt.xlabel("eps")
plt.ylabel("error")
plt.legend()
plt.savefig("{name}.png", dpi=120)
'''


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, dict keys to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def report_json(report: RateReport, cfg: ExperimentConfig) -> str:
    """Deterministic text: no timings, sorted keys."""
    d = {"config": cfg.to_dict(), "config_sha256": cfg.digest(), "version": __version__,
         **report.to_dict()}
    d["config"].pop("outputs")
    return json.dumps(_clean(d), sort_keys=True, indent=1)


def write_csv(report: RateReport, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in report.rows:
            for e, v in row.table:
                w.writerow((repr(float(e)), row.quantity, row.norm, repr(float(v))))


def write_report(report: RateReport, cfg: ExperimentConfig, out: str | Path,
                 wall_time: float, threads: int) -> dict:
    """Write every artifact under ``out`` and return the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    name = cfg.experiment
    paths = {"report": out / f"{name}.json", "csv": out / f"{name}.csv",
             "plot": out / f"plot_{name}.py", "manifest": out / "manifest.json"}
    paths["report"].write_text(report_json(report, cfg))
    write_csv(report, paths["csv"])
    paths["plot"].write_text(PLOT_SCRIPT.format(name=name, csv=paths["csv"].name))
    manifest = {
        "experiment": name, "config_sha256": cfg.digest(), "version": __version__,
        "python": platform.python_version(), "numpy": np.__version__,
        "seeds": {"initial_data": cfg.seed}, "threads": threads,
        "wall_time_s": round(wall_time, 3),
        "status": "incomplete" if report.incomplete else
                  ("pass" if report.all_passed else "rate-target-missed"),
        "artifacts": {k: str(p) for k, p in paths.items()},
        "fields": sorted(str(p) for p in report.files),
    }
    # one manifest per output directory; each experiment owns its entry
    runs = {}
    if paths["manifest"].exists():
        runs = json.loads(paths["manifest"].read_text()).get("runs", {})
    runs[name] = manifest
    paths["manifest"].write_text(json.dumps({"runs": runs}, indent=1, sort_keys=True))
    return manifest


def format_table(report: RateReport) -> str:
    lines = [f"{'quantity':<22}{'norm':<16}{'slope':>8}  {'95% interval':<20}{'target':<14}result"]
    for r in report.rows:
        lo, hi = r.target
        tgt = f"[{'' if lo is None else lo}, {'' if hi is None else hi}]"
        if r.fit is None:
            lines.append(f"{r.quantity:<22}{r.norm:<16}{'-':>8}  {'':<20}{tgt:<14}{r.note}")
            continue
        ci = f"[{r.fit.interval[0]:.3f}, {r.fit.interval[1]:.3f}]"
        res = ("PASS" if r.passed else "FAIL") if r.asserted else "info"
        lines.append(f"{r.quantity:<22}{r.norm:<16}{r.fit.slope:8.3f}  {ci:<20}{tgt:<14}{res}")
    for item in report.incomplete:
        lines.append(f"incomplete: eps={item['eps']} {item['code']}")
    return "\n".join(lines)
