"""Accuracy and cost evaluation.

Violations are the positive class: a verdict that flags a leak as
contradicted or undeclared is a predicted positive. Percentages are
computed on exact fractions and only rounded for display.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .consistency_checker import Verdict, VerdictRecord, verdict_record
from .kg_model import FlowRef
from .llm_client import CostReport, UsageLedger, ledger_totals

SCHEMA_TRUTH = "policykg-truth/1"


class ProvenanceMismatchError(ValueError):
    def __init__(self, missing: Sequence[FlowRef]):
        self.missing = list(missing)
        listed = ", ".join(str(p) for p in self.missing[:20])
        more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
        super().__init__(f"{len(self.missing)} verdict(s) have no ground-truth entry: {listed}{more}")


class DuplicateEntryError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthEntry:
    provenance: FlowRef
    label: bool


def truth_index(entries: Iterable[GroundTruthEntry]) -> dict[FlowRef, bool]:
    index: dict[FlowRef, bool] = {}
    for e in entries:
        if e.provenance in index:
            raise DuplicateEntryError(f"duplicate ground-truth entry for {e.provenance}")
        index[e.provenance] = e.label
    return index


def load_truth(path: str | Path) -> list[GroundTruthEntry]:
    """Read a ground-truth TSV: ``# schema: policykg-truth/1`` then
    ``file  record  label`` rows (label 1 = real violation)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != f"# schema: {SCHEMA_TRUTH}":
        raise ValueError(f"{path}: missing '# schema: {SCHEMA_TRUTH}' header")
    rows = csv.DictReader((l for l in lines[1:] if l.strip() and not l.startswith("#")), delimiter="\t")
    entries = [
        GroundTruthEntry(FlowRef(r["file"], int(r["record"])), r["label"].strip() in ("1", "true", "True"))
        for r in rows
    ]
    truth_index(entries)
    return entries


def save_truth(entries: Iterable[GroundTruthEntry], path: str | Path) -> None:
    buf = io.StringIO()
    buf.write(f"# schema: {SCHEMA_TRUTH}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["file", "record", "label"])
    for e in entries:
        w.writerow([e.provenance.file, e.provenance.record, int(e.label)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -- accuracy ------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _predictions(verdicts: Iterable[VerdictRecord | Verdict]) -> dict[FlowRef, bool]:
    pred: dict[FlowRef, bool] = {}
    for v in verdicts:
        rec = verdict_record(v) if isinstance(v, Verdict) else v
        for ref in rec.covers:
            if ref in pred:
                raise DuplicateEntryError(f"more than one verdict covers {ref}")
            pred[ref] = rec.violation
    return pred


def score(verdicts: Iterable[VerdictRecord | Verdict], truth: Iterable[GroundTruthEntry] | Mapping[FlowRef, bool]
          ) -> ConfusionCounts:
    labels = dict(truth) if isinstance(truth, Mapping) else truth_index(truth)
    pred = _predictions(verdicts)
    missing = sorted(ref for ref in pred if ref not in labels)
    if missing:
        raise ProvenanceMismatchError(missing)
    tp = sum(1 for r, p in pred.items() if p and labels[r])
    fp = sum(1 for r, p in pred.items() if p and not labels[r])
    tn = sum(1 for r, p in pred.items() if not p and not labels[r])
    fn = sum(1 for r, p in pred.items() if not p and labels[r])
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> Fraction | None:
    return None if den == 0 else Fraction(num, den)


@dataclass(frozen=True)
class Metrics:
    """Exact precision / recall / F1 as fractions; ``None`` means undefined."""

    precision: Fraction | None
    recall: Fraction | None
    f1: Fraction | None

    @property
    def defined(self) -> bool:
        return None not in (self.precision, self.recall, self.f1)

    def percentages(self, places: int = 2) -> tuple[Decimal | None, Decimal | None, Decimal | None]:
        return tuple(percent(x, places) for x in (self.precision, self.recall, self.f1))


def percent(x: Fraction | None, places: int = 2) -> Decimal | None:
    if x is None:
        return None
    q = Decimal(1).scaleb(-places)
    return (Decimal(x.numerator * 100) / Decimal(x.denominator)).quantize(q, rounding=ROUND_HALF_UP)


def metrics(c: ConfusionCounts) -> Metrics:
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    f1 = None
    if p is not None and r is not None and p + r != 0:
        f1 = 2 * p * r / (p + r)
    return Metrics(p, r, f1)


def _fmt(x: Decimal | None) -> str:
    return "undefined" if x is None else str(x)


def metrics_rows(results: Mapping[str, Metrics]) -> list[list[str]]:
    names = list(results)
    rows = [["Metrics"] + names]
    for i, label in enumerate(("Precision (%)", "Recall (%)", "F1 (%)")):
        rows.append([label] + [_fmt(results[n].percentages()[i]) for n in names])
    return rows


# -- cost ----------------------------------------------------------------------


@dataclass(frozen=True)
class CostComparison:
    names: list[str]
    rows: list[tuple[str, list[int | float | None]]]
    reductions: list[tuple[str, list[Decimal | None]]]

    def table(self) -> list[list[str]]:
        out = [["Cost"] + self.names]
        for label, values in self.rows:
            out.append([label] + ["n/a" if v is None else f"{v:g}" if isinstance(v, float) else str(v)
                                  for v in values])
        for label, values in self.reductions:
            out.append([f"{label} reduction (%)"] + ["-" if i == 0 else _fmt(v) for i, v in enumerate(values)])
        return out


def reduction(base: float | None, other: float | None) -> Decimal | None:
    """Percentage saved by ``other`` relative to ``base`` (1 decimal)."""
    if base is None or other is None or base == 0:
        return None
    return percent(Fraction(base - other) / Fraction(base), 1)


def compare_costs(ledgers: Sequence[tuple[str, UsageLedger | CostReport]]) -> CostComparison:
    if len(ledgers) < 2:
        raise ValueError("need at least two ledgers to compare")
    names = [n for n, _ in ledgers]
    reports = [x if isinstance(x, CostReport) else ledger_totals(x) for _, x in ledgers]
    rows: list[tuple[str, list]] = [
        ("Prompt token", [r.overall.prompt_tokens for r in reports]),
        ("Completion token", [r.overall.completion_tokens for r in reports]),
        ("Total token", [r.overall.total_tokens for r in reports]),
        ("Model time (sec)", [r.overall.elapsed_ms / 1000 for r in reports]),
        ("Time (sec)", [None if r.wall_clock_ms is None else r.wall_clock_ms / 1000 for r in reports]),
    ]
    reductions = [
        (label, [reduction(values[0], v) for v in values])
        for label, values in rows if label in ("Total token", "Time (sec)")
    ]
    return CostComparison(names, rows, reductions)


# -- output --------------------------------------------------------------------


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(line.rstrip() for line in lines)


def write_csv(rows: Sequence[Sequence[str]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
