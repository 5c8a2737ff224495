"""Reliability / generality / locality / CompRel / KUR over JSONL ledgers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

REPORT_VERSION = 1

METRIC_KINDS = {
    "VisRel": "vis_rel",
    "TextRel": "text_rel",
    "TextGen": "text_gen",
    "ImageGen": "image_gen",
    "TextLoc": "text_loc",
    "ImageLoc": "image_loc",
    "CompRel": "comp_rel",
}
COLUMNS = ["VisRel", "TextRel", "TextGen", "ImageGen", "TextLoc", "ImageLoc", "CompRel", "KUR"]


class UndefinedMetric(ValueError):
    pass


def _rows(ledger, probe_kind: str, gap: int, strategy: str | None = None):
    return [r for r in ledger if r["probe_kind"] == probe_kind and r["gap"] == gap
            and (strategy is None or r.get("strategy") == strategy)]


def _rate(ledger, probe_kind: str, gap: int, strategy: str | None = None) -> tuple[float, int]:
    rows = _rows(ledger, probe_kind, gap, strategy)
    if not rows:
        raise UndefinedMetric(f"no {probe_kind} samples at gap {gap}")
    return sum(r["outcome"] for r in rows) / len(rows), len(rows)


def reliability(ledger, kind: str, gap: int) -> float:
    key = {"visual": "vis_rel", "textual": "text_rel"}[kind]
    return _rate(ledger, key, gap)[0]


def generality(ledger, kind: str, gap: int) -> float:
    if kind not in ("text_gen", "image_gen"):
        raise ValueError(kind)
    return _rate(ledger, kind, gap)[0]


def locality(ledger, kind: str, gap: int) -> float:
    """Agreement with the pre-edit model's output; rows must carry that baseline as gold."""
    if kind not in ("text_loc", "image_loc"):
        raise ValueError(kind)
    for r in _rows(ledger, kind, gap):
        if r.get("gold") is None:
            raise UndefinedMetric(f"locality row without a pre-edit baseline: {r}")
    return _rate(ledger, kind, gap)[0]


def comp_rel(ledger, gap: int) -> float:
    return _rate(ledger, "comp_rel", gap)[0]


def kur(comp_rel: float, vis_rel: float, text_rel: float) -> float:
    denom = vis_rel + text_rel
    if denom <= 0:
        raise UndefinedMetric("KUR undefined when VisRel + TextRel = 0")
    return 2.0 * comp_rel / denom


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    def get(self, strategy: str, gap, metric: str) -> float:
        for r in self.rows:
            if r["strategy"] == strategy and r["gap"] == gap:
                return r[metric]
        raise KeyError((strategy, gap))

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["strategy", "gap"] + COLUMNS + [f"n_{c}" for c in COLUMNS if c != "KUR"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})
        return f"# kedit-report v{REPORT_VERSION}\n" + buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def evaluate_run(ledger, schedule, strategy: str | None = None) -> MetricsReport:
    """Per-gap rows plus a labelled gap-averaged row (``gap == "avg"``).

    A metric with no samples at a gap is left empty in the table; the
    single-metric functions above raise instead of guessing.
    """
    strategies = [strategy] if strategy else sorted({r["strategy"] for r in ledger})
    report = MetricsReport()
    for s in strategies:
        per_gap = []
        for g in schedule:
            row = {"strategy": s, "gap": g}
            for name, kind in METRIC_KINDS.items():
                try:
                    row[name], row[f"n_{name}"] = _rate(ledger, kind, g, s)
                except UndefinedMetric:
                    row[name], row[f"n_{name}"] = None, 0
            try:
                row["KUR"] = kur(row["CompRel"], row["VisRel"], row["TextRel"])
            except (UndefinedMetric, TypeError):
                row["KUR"] = None
            per_gap.append(row)
        report.rows += per_gap
        avg = {"strategy": s, "gap": "avg"}
        for name in COLUMNS:
            vals = [r[name] for r in per_gap if r[name] is not None]
            avg[name] = sum(vals) / len(vals) if vals else None
        for name in METRIC_KINDS:
            avg[f"n_{name}"] = sum(r[f"n_{name}"] for r in per_gap)
        report.rows.append(avg)
    return report


def exact_fraction(ledger, probe_kind: str, gap: int) -> Fraction:
    rows = _rows(ledger, probe_kind, gap)
    if not rows:
        raise UndefinedMetric(f"no {probe_kind} samples at gap {gap}")
    return Fraction(sum(r["outcome"] for r in rows), len(rows))
