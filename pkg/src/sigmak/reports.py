"""Check and probe reports with deterministic JSON/CSV serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


def _clean(obj: Any) -> Any:
    # JSON-safe: numpy scalars to python, non-finite floats to strings
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def observed_orders(hs, errors, floor: float = 0.0) -> list[float]:
    """log-ratio orders between consecutive levels.

    A pair whose errors both sit at or below ``floor`` is exact to rounding
    and reported as +inf.
    """
    out = []
    for i in range(len(hs) - 1):
        e0, e1 = float(errors[i]), float(errors[i + 1])
        if e0 <= floor and e1 <= floor:
            out.append(math.inf)
        elif e1 <= 0.0 or e0 <= 0.0:
            out.append(math.inf if e1 <= e0 else -math.inf)
        else:
            out.append(math.log(e0 / e1) / math.log(float(hs[i]) / float(hs[i + 1])))
    return out


@dataclass
class CheckReport:
    """Outcome of one verification (``kind="check"``) or probe (``kind="probe"``)."""

    name: str
    paper_ref: str
    kind: str = "check"
    levels: list[dict] = field(default_factory=list)
    observed_order: float | None = None
    implied_constant: float | None = None
    passed: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "paper_ref": self.paper_ref,
            "kind": self.kind,
            "levels": self.levels,
            "observed_order": self.observed_order,
            "implied_constant": self.implied_constant,
            "pass": self.passed,
        }
        d.update(self.details)
        return _clean(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols: list[str] = []
        for row in self.levels:
            for key in row:
                if key not in cols:
                    cols.append(key)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.levels:
            writer.writerow([_fmt(row.get(c, "")) for c in cols])
        return buf.getvalue()

    def __bool__(self) -> bool:
        return bool(self.passed)


def _fmt(v) -> str:
    v = _clean(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
