"""Log-log rate fits and rate tables."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..errors import SolverError


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    interval: tuple[float, float]


def fit_rate(pairs) -> RateFit:
    """Least-squares line through (log eps, log error) with a 95% interval
    on the slope (Student t with n-2 degrees of freedom)."""
    pairs = [(float(e), float(v)) for e, v in pairs]
    if len(pairs) < 3:
        raise SolverError("invalid-config", "a rate fit needs at least three points")
    if any(e <= 0 or not v > 0 for e, v in pairs):
        raise SolverError("exact-or-invalid", "rate fit needs positive eps and errors")
    x = np.log([e for e, _ in pairs])
    y = np.log([v for _, v in pairs])
    res = stats.linregress(x, y)
    n = len(pairs)
    half = stats.t.ppf(0.975, n - 2) * res.stderr if n > 2 else np.inf
    return RateFit(float(res.slope), float(res.intercept),
                   (float(res.slope - half), float(res.slope + half)))


@dataclass
class RateRow:
    quantity: str
    norm: str
    table: list                    # [(eps, error), ...]
    target: tuple                  # (lower or None, upper or None)
    asserted: bool = True
    fit: RateFit | None = None
    note: str = ""

    @property
    def passed(self) -> bool | None:
        if self.fit is None:
            return None
        lo, hi = self.target
        s = self.fit.slope
        return (lo is None or s >= lo) and (hi is None or s <= hi)

    def to_dict(self) -> dict:
        return {
            "quantity": self.quantity, "norm": self.norm,
            "table": [[e, v] for e, v in self.table],
            "target": list(self.target), "asserted": self.asserted,
            "slope": None if self.fit is None else self.fit.slope,
            "interval": None if self.fit is None else list(self.fit.interval),
            "passed": self.passed, "note": self.note,
        }


@dataclass
class RateReport:
    experiment: str
    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    incomplete: list = field(default_factory=list)
    files: list = field(default_factory=list)      # extra artifacts written by the run

    def add(self, row: RateRow) -> RateRow:
        try:
            row.fit = fit_rate(row.table)
        except SolverError as e:
            row.note = f"{e.code}: {e}"
        self.rows.append(row)
        return row

    def row(self, quantity: str) -> RateRow:
        for r in self.rows:
            if r.quantity == quantity:
                return r
        raise KeyError(quantity)

    @property
    def all_passed(self) -> bool:
        return not self.incomplete and all(r.passed for r in self.rows if r.asserted)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "rows": [r.to_dict() for r in self.rows],
                "extras": self.extras, "incomplete": self.incomplete,
                "all_passed": self.all_passed}


def non_increasing(values, tol: float = 0.05) -> bool:
    """Each value at most (1 + tol) times its predecessor."""
    return all(b <= a * (1 + tol) for a, b in zip(values, values[1:]))
