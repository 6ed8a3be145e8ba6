"""Deterministic policy/leak consistency check and inconsistency reports.

For every leak triple the policy graph is scanned in document order. The
first policy triple whose actor covers the leak actor and whose data type
is equal decides the verdict, provided its action is either the leak's
action (consistent) or its negation (contradicted). When the scan finds
nothing the leak is undeclared. Contradicted and undeclared leaks are
violations.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .kg_model import (
    ActorKind,
    FlowRef,
    KGKind,
    KnowledgeGraph,
    Provenance,
    Triple,
    negate_action,
    provenance_from_dict,
    provenance_to_dict,
    triple_to_dict,
)
from .llm_client import LLMError, Stage
from .prompts import load_prompt
from .validation import check_kg, check_leak_triple

logger = logging.getLogger(__name__)

SCHEMA_VERDICTS = "policykg-verdicts/1"


class Outcome(str, Enum):
    CONSISTENT = "Consistent"
    CONTRADICTED = "Contradicted"
    UNDECLARED = "Undeclared"


@dataclass(frozen=True)
class Verdict:
    leak: Triple
    outcome: Outcome
    matched_policy: Triple | None = None
    covers: tuple[Provenance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        if (self.outcome is Outcome.UNDECLARED) != (self.matched_policy is None):
            raise ValueError("only undeclared verdicts lack a matched policy triple")
        if not self.covers:
            object.__setattr__(self, "covers", (self.leak.provenance,))

    @property
    def violation(self) -> bool:
        return self.outcome is not Outcome.CONSISTENT


def _covers(p: Triple, l: Triple) -> bool:
    return p.actor.covers(l.actor) and p.data == l.data


def check_leak(l: Triple, policy: KnowledgeGraph, warnings: list[str] | None = None) -> Verdict:
    check_leak_triple(l)
    check_kg(policy, KGKind.POLICY, "policy graph")
    opposite = negate_action(l.action)
    for i, p in enumerate(policy):
        if not _covers(p, l):
            continue
        if p.action == l.action or p.action == opposite:
            if warnings is not None:
                _warn_self_conflict(l, p, policy.triples[i + 1:], warnings)
            outcome = Outcome.CONSISTENT if p.action == l.action else Outcome.CONTRADICTED
            return Verdict(l, outcome, p)
    return Verdict(l, Outcome.UNDECLARED)


def _warn_self_conflict(l: Triple, first: Triple, rest: Sequence[Triple], warnings: list[str]) -> None:
    flipped = negate_action(first.action)
    for q in rest:
        if _covers(q, l) and q.action == flipped:
            warnings.append(
                f"policy self-conflict for {l}: {first} at {first.provenance} and {q} at {q.provenance}; "
                f"the earlier statement was used"
            )
            return


def check_all(leak: KnowledgeGraph, policy: KnowledgeGraph, warnings: list[str] | None = None) -> list[Verdict]:
    check_kg(leak, KGKind.LEAK, "leak graph")
    check_kg(policy, KGKind.POLICY, "policy graph")
    out = []
    for i, l in enumerate(leak):
        v = check_leak(l, policy, warnings)
        out.append(Verdict(v.leak, v.outcome, v.matched_policy, leak.provenances(i)))
    return out


# -- reports -------------------------------------------------------------------


@dataclass(frozen=True)
class Report:
    verdict: Verdict
    template: str
    polished: str | None = None

    @property
    def text(self) -> str:
        return self.polished or self.template


def _who(t: Triple) -> str:
    if t.actor.kind is ActorKind.FIRST_PARTY:
        return "the app"
    return f"third party '{t.actor.name}'" if t.actor.name else "a third party"


def _practice(t: Triple) -> str:
    verb = "shares" if t.action.verb.value == "share" else "collects"
    if t.action.negated:
        verb = "does not " + verb[:-1]
    data = t.data.label if t.data.label == t.data.id else f"{t.data.label} ({t.data.id})"
    return f"{_who(t)} {verb} {data}"


def template_report(v: Verdict) -> str:
    if v.outcome is Outcome.CONSISTENT:
        raise ValueError("reports are only produced for violations")
    leak = v.leak
    where = ", ".join(str(p) for p in v.covers)
    lines = [
        f"Inconsistency ({v.outcome.value.lower()}): {leak}",
        f"Observed behaviour: {_practice(leak)}; data flow at {where}.",
    ]
    if v.outcome is Outcome.CONTRADICTED:
        p = v.matched_policy
        lines.append(f"Policy statement {p} at {p.provenance} declares that {_practice(p)}.")
        lines.append("The observed data flow contradicts this statement.")
    else:
        lines.append(
            f"No policy statement covers this flow: nothing in the policy declares whether "
            f"{_who(leak)} {leak.action.verb.value}s {leak.data.label}."
        )
    return "\n".join(lines)


def render_report(v: Verdict, client=None, warnings: list[str] | None = None) -> Report:
    """Template report for a violation, optionally rewritten by the model."""
    text = template_report(v)
    if client is None:
        return Report(v, text)
    prompt = load_prompt("report_polish")
    try:
        polished = client.complete(Stage.REPORT, prompt.render(report=text), prompt.ref).response.strip()
    except LLMError as exc:
        msg = f"report for {v.leak.provenance}: model rewrite failed, keeping template ({exc})"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return Report(v, text)
    return Report(v, text, polished or None)


def render_reports(verdicts: Iterable[Verdict], client=None, warnings: list[str] | None = None) -> list[Report]:
    violations = [v for v in verdicts if v.violation]
    if client is None:
        return [render_report(v) for v in violations]
    return client.map(lambda v: render_report(v, client, warnings), violations)


def write_reports(reports: Sequence[Report], out_dir: str | Path, single_file: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blocks = []
    for i, r in enumerate(reports):
        body = r.template if r.polished is None else f"{r.template}\n\n--- rewritten ---\n{r.polished}"
        blocks.append(body + "\n")
    if single_file:
        path = out_dir / "reports.txt"
        path.write_text("\n".join(blocks), encoding="utf-8")
        return [path]
    paths = []
    for i, body in enumerate(blocks):
        path = out_dir / f"violation_{i:03d}.txt"
        path.write_text(body, encoding="utf-8")
        paths.append(path)
    return paths


# -- verdict files ---------------------------------------------------------------


@dataclass(frozen=True)
class VerdictRecord:
    """Pipeline-agnostic row of a verdict file."""

    provenance: FlowRef
    violation: bool
    outcome: str
    covers: tuple[FlowRef, ...] = ()
    leak: dict | None = None
    matched_policy: dict | None = None
    rationale: str | None = None

    def __post_init__(self):
        if not self.covers:
            object.__setattr__(self, "covers", (self.provenance,))

    def to_dict(self) -> dict:
        d = {
            "provenance": provenance_to_dict(self.provenance),
            "covers": [provenance_to_dict(p) for p in self.covers],
            "violation": self.violation,
            "outcome": self.outcome,
            "leak": self.leak,
            "matched_policy": self.matched_policy,
        }
        if self.rationale is not None:
            d["rationale"] = self.rationale
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VerdictRecord":
        return cls(
            provenance_from_dict(d["provenance"]),
            bool(d["violation"]),
            str(d["outcome"]),
            tuple(provenance_from_dict(p) for p in d.get("covers", [])),
            d.get("leak"),
            d.get("matched_policy"),
            d.get("rationale"),
        )


def verdict_record(v: Verdict) -> VerdictRecord:
    return VerdictRecord(
        v.leak.provenance,
        v.violation,
        v.outcome.value,
        tuple(v.covers),
        triple_to_dict(v.leak),
        triple_to_dict(v.matched_policy) if v.matched_policy else None,
    )


def save_verdicts(records: Iterable[VerdictRecord | Verdict], path: str | Path, pipeline: str = "hybrid",
                  warnings: Sequence[str] = ()) -> None:
    rows = [verdict_record(r) if isinstance(r, Verdict) else r for r in records]
    doc = {
        "schema": SCHEMA_VERDICTS,
        "pipeline": pipeline,
        "summary": {
            "verdicts": len(rows),
            "violations": sum(r.violation for r in rows),
            "outcomes": {o: sum(r.outcome == o for r in rows) for o in sorted({r.outcome for r in rows})},
        },
        "verdicts": [r.to_dict() for r in rows],
        "warnings": list(warnings),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_verdicts(path: str | Path) -> tuple[str, list[VerdictRecord]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != SCHEMA_VERDICTS:
        raise ValueError(f"{path}: unsupported verdict schema {doc.get('schema')!r}")
    return doc.get("pipeline", ""), [VerdictRecord.from_dict(d) for d in doc["verdicts"]]


class ConsistencyChecker(BaseEstimator):
    """Fit on a PolicyKG, then predict violations for leak triples.

    ``predict`` returns a boolean array (``True`` = violation) aligned with
    the leaks passed in; ``check`` returns the full :class:`Verdict` list.
    """

    def __init__(self, warn_conflicts=True):
        self.warn_conflicts = warn_conflicts

    def fit(self, X: KnowledgeGraph, y=None):
        self.policy_kg_ = check_kg(X, KGKind.POLICY, "policy graph")
        self.warnings_: list[str] = []
        return self

    def check(self, X) -> list[Verdict]:
        check_is_fitted(self, "policy_kg_")
        sink = self.warnings_ if self.warn_conflicts else None
        if isinstance(X, KnowledgeGraph):
            return check_all(X, self.policy_kg_, sink)
        return [check_leak(l, self.policy_kg_, sink) for l in X]

    def predict(self, X) -> np.ndarray:
        return np.array([v.violation for v in self.check(X)], dtype=bool)
