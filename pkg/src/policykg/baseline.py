"""Pure-LLM comparison pipeline.

Three sequential model stages: summarise the FlowDroid output, pick the
relevant methods, then judge each method against the full policy text.
Judgments are mapped back onto FlowDroid records so the result can be
scored exactly like the hybrid checker's verdicts.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .consistency_checker import VerdictRecord
from .leak_extractor import FlowDroidParseError, FlowRecord, display_path, parse_flowdroid_xml
from .llm_client import Stage
from .prompts import load_prompt
from .replies import MalformedReply, parse_json_reply
from .validation import check_client, check_paths, check_text

logger = logging.getLogger(__name__)

NO_FLOWS = "NO FLOWS"
_VERDICT = re.compile(r"VERDICT:\s*(CONSISTENT|VIOLATION)", re.IGNORECASE)


@dataclass(frozen=True)
class SimilarityJudgment:
    method: str
    policy_excerpt: str
    verdict: bool
    rationale: str
    leak_refs: tuple = ()


def chunk_text(text: str, limit: int) -> list[str]:
    """Split on line boundaries into pieces of at most ``limit`` characters
    (a single longer line is cut hard)."""
    chunks, current = [], ""
    for line in text.splitlines(keepends=True):
        while len(line) > limit:
            if current:
                chunks.append(current)
                current = ""
            chunks.append(line[:limit])
            line = line[limit:]
        if len(current) + len(line) > limit:
            chunks.append(current)
            current = ""
        current += line
    if current.strip():
        chunks.append(current)
    return chunks


def baseline_stage1(xml_paths: Iterable[str | Path], client, chunk_chars: int = 6000) -> str:
    prompt = load_prompt("baseline_stage1")
    chunks = []
    for path in check_paths(list(xml_paths)):
        chunks += chunk_text(Path(path).read_text(encoding="utf-8"), chunk_chars)
    replies = client.map(
        lambda c: client.complete(Stage.BASELINE_STAGE1, prompt.render(chunk=c), prompt.ref).response.strip(),
        chunks,
    )
    return "\n".join(replies)


def _has_flows(summary: str) -> bool:
    lines = [l.strip() for l in summary.splitlines() if l.strip()]
    return any(l.upper() != NO_FLOWS for l in lines)


def _parse_methods(reply: str) -> list[str]:
    items = parse_json_reply(reply, list)
    if not all(isinstance(x, str) for x in items):
        raise MalformedReply("method list must contain only strings")
    return list(dict.fromkeys(" ".join(x.split()) for x in items if x.strip()))


def baseline_stage2(summary: str, client, warnings: list[str] | None = None) -> list[str]:
    if not _has_flows(summary):
        return []
    prompt = load_prompt("baseline_stage2")
    reply = client.complete(Stage.BASELINE_STAGE2, prompt.render(summary=summary), prompt.ref).response
    try:
        return _parse_methods(reply)
    except MalformedReply:
        fix = load_prompt("reformat")
        reply = client.complete(Stage.BASELINE_STAGE2, fix.render(shape='["<method signature>", ...]',
                                                                  previous=reply), fix.ref).response
        try:
            return _parse_methods(reply)
        except MalformedReply as exc:
            msg = f"baseline stage 2: malformed method list after retry ({exc})"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            return []


def _flows_for(method: str, summary: str) -> str:
    lines = [l for l in summary.splitlines() if method in l]
    return "\n".join(lines) or "(none listed)"


def _parse_verdict(reply: str) -> bool | None:
    found = _VERDICT.findall(reply)
    if not found:
        return None
    return found[-1].upper() == "CONSISTENT"


def baseline_stage3(methods: Sequence[str], policy_doc: str, client, summary: str = "",
                    warnings: list[str] | None = None) -> list[SimilarityJudgment]:
    prompt = load_prompt("baseline_stage3")
    excerpt = " ".join(policy_doc.split())[:200]

    def judge(method: str) -> SimilarityJudgment | None:
        text = prompt.render(method=method, flows=_flows_for(method, summary), policy=policy_doc)
        reply = client.complete(Stage.BASELINE_STAGE3, text, prompt.ref).response
        verdict = _parse_verdict(reply)
        if verdict is None:
            fix = load_prompt("reformat")
            retry = client.complete(Stage.BASELINE_STAGE3, fix.render(shape="VERDICT: CONSISTENT | VERDICT: VIOLATION",
                                                                      previous=reply), fix.ref).response
            verdict = _parse_verdict(retry)
            if verdict is None:
                msg = f"baseline stage 3: no verdict token for {method}"
                logger.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
                return None
        return SimilarityJudgment(method, excerpt, verdict, reply.strip())

    return [j for j in client.map(judge, list(methods)) if j is not None]


def _norm(sig: str) -> str:
    return " ".join(sig.split())


def _record_methods(rec: FlowRecord) -> set[str]:
    return {_norm(rec.sink_method)} | {_norm(s.method) for s in rec.sources if s.method}


def judgments_to_verdicts(records: Sequence[FlowRecord], judgments: Sequence[SimilarityJudgment]
                          ) -> list[VerdictRecord]:
    """A record is a violation when any judged method it contains was judged
    a violation; records whose methods were never judged are not flagged."""
    by_method = {_norm(j.method): j for j in judgments}
    out = []
    for rec in records:
        hits = [by_method[m] for m in sorted(_record_methods(rec)) if m in by_method]
        if not hits:
            out.append(VerdictRecord(rec.ref, False, "NotJudged"))
            continue
        bad = [j for j in hits if not j.verdict]
        chosen = bad[0] if bad else hits[0]
        out.append(VerdictRecord(rec.ref, bool(bad), "Violation" if bad else "Consistent",
                                 rationale=f"{chosen.method}: {chosen.rationale}"))
    return out


def run_baseline(policy_doc: str, xml_paths: Iterable[str | Path], client, chunk_chars: int = 6000,
                 warnings: list[str] | None = None) -> list[VerdictRecord]:
    check_text(policy_doc, "policy document")
    paths = check_paths(list(xml_paths))
    warnings = warnings if warnings is not None else []
    records: list[FlowRecord] = []
    parsed: list[Path] = []
    for path in paths:
        errors: list = []
        try:
            records += parse_flowdroid_xml(path, errors, display_path(path))
            parsed.append(path)
        except FlowDroidParseError as exc:
            warnings.append(f"baseline skips {exc}")
        warnings.extend(str(e) for e in errors)
    if not parsed:
        return []
    summary = baseline_stage1(parsed, client, chunk_chars)
    methods = baseline_stage2(summary, client, warnings)
    judgments = baseline_stage3(methods, policy_doc, client, summary, warnings)
    judgments = [
        replace(j, leak_refs=tuple(r.ref for r in records if _norm(j.method) in _record_methods(r)))
        for j in judgments
    ]
    return judgments_to_verdicts(records, judgments)


class BaselineChecker(BaseEstimator):
    """Pure-LLM checker: ``fit`` on the policy text, ``predict`` on XML paths."""

    def __init__(self, client=None, chunk_chars=6000):
        self.client = client
        self.chunk_chars = chunk_chars

    def fit(self, X: str, y=None):
        check_client(self.client, type(self).__name__)
        self.policy_ = check_text(X, "policy document")
        return self

    def check(self, X) -> list[VerdictRecord]:
        check_is_fitted(self, "policy_")
        self.warnings_: list[str] = []
        return run_baseline(self.policy_, X, self.client, self.chunk_chars, self.warnings_)

    def predict(self, X) -> np.ndarray:
        return np.array([v.violation for v in self.check(X)], dtype=bool)
