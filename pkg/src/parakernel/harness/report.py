"""Verification reports: machine-checkable criteria, stable JSON and CSV tables."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..dual import dump_json


class ReportError(OSError):
    pass


_RELATIONS = ("le", "ge", "abs", "rel", "eq")


@dataclass
class Criterion:
    """``measured`` against ``expected`` under ``relation``.

    le: measured <= expected + tol, ge: measured >= expected - tol,
    abs: |measured - expected| <= tol, rel: |measured - expected| <= tol |expected|,
    eq: measured == expected exactly.
    """

    name: str
    measured: float
    expected: float
    tol: float
    relation: str
    provenance: str
    passed: bool = field(init=False)

    def __post_init__(self):
        if self.relation not in _RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")
        m, e, t = float(self.measured), float(self.expected), float(self.tol)
        if math.isnan(m):
            ok = False
        elif self.relation == "le":
            ok = m <= e + t
        elif self.relation == "ge":
            ok = m >= e - t
        elif self.relation == "abs":
            ok = abs(m - e) <= t
        elif self.relation == "rel":
            ok = abs(m - e) <= t * abs(e)
        else:
            ok = m == e
        self.passed = bool(ok)

    def as_dict(self) -> dict:
        return {
            "name": self.name, "measured": float(self.measured), "expected": float(self.expected),
            "tol": float(self.tol), "relation": self.relation, "provenance": self.provenance,
            "passed": self.passed,
        }

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: measured={self.measured:.6g} expected={self.expected:.6g} ({self.relation}, tol={self.tol:.3g})"


@dataclass
class Report:
    experiment: str
    criteria: list[Criterion] = field(default_factory=list)
    values: dict = field(default_factory=dict)
    stamps: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    wall_clock: float = 0.0

    def check(self, name, measured, expected, tol, relation, provenance) -> Criterion:
        c = Criterion(name, measured, expected, tol, relation, provenance)
        self.criteria.append(c)
        return c

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def as_dict(self) -> dict:
        # wall-clock lives in timing.json so that report.json stays byte-stable
        return {
            "experiment": self.experiment,
            "criteria": [c.as_dict() for c in self.criteria],
            "passed": self.passed,
            "values": self.values,
            "stamps": self.stamps,
            "config": self.config,
        }

    def summary(self) -> str:
        return "\n".join([f"{self.experiment}: {'PASS' if self.passed else 'FAIL'}"] + [c.line() for c in self.criteria])


def format_float(x: float) -> str:
    return f"{float(x):.17g}"


def _cell(x) -> str:
    if isinstance(x, str):
        if any(ch in x for ch in ",\n\""):
            raise ValueError(f"CSV cell {x!r} needs quoting")
        return x
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    return format_float(x)


def write_csv(path: Path, header: str, rows) -> Path:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(_cell(x) for x in r) + "\n")
    return path


def write_report(report: Report, directory: str | Path) -> list[Path]:
    """``report.json``, one CSV per table and ``timing.json``; returns the paths written."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        if not os.access(d, os.W_OK):
            raise PermissionError(f"directory not writable: {d}")
        out = []
        p = d / "report.json"
        p.write_text(dump_json(report.as_dict()) + "\n", encoding="utf-8", newline="\n")
        out.append(p)
        for name in sorted(report.tables):
            header, rows = report.tables[name]
            out.append(write_csv(d / f"{name}.csv", header, rows))
        t = d / "timing.json"
        t.write_text(dump_json({"wall_clock_s": report.wall_clock}) + "\n", encoding="utf-8", newline="\n")
        out.append(t)
    except OSError as exc:
        raise ReportError(f"cannot write report to {d}: {exc}") from exc
    return out
