"""FlowDroid XML results -> LeakKG.

Each ``<Result>`` element becomes a :class:`FlowRecord`; each record is then
classified into a non-negated ``<actor, action, data>`` triple, by the
shipped rule tables and optionally by the model.
"""
from __future__ import annotations

import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .kg_model import (
    FIRST_PARTY,
    Action,
    Actor,
    ActorKind,
    DataType,
    FlowRef,
    KGKind,
    KnowledgeGraph,
    Triple,
    Verb,
    Vocabulary,
    VocabularyError,
    get_vocabulary,
    load_data_file,
    normalize_action,
    normalize_actor,
    normalize_data_type,
)
from .llm_client import Stage
from .prompts import load_prompt
from .replies import MalformedReply, parse_json_reply
from .validation import check_paths

logger = logging.getLogger(__name__)

LLM_MODES = ("off", "fallback", "override")


class FlowDroidParseError(ValueError):
    def __init__(self, path: str, line: int | None, column: int | None, reason: str):
        where = f"{path}:{line}:{column}" if line is not None else path
        super().__init__(f"{where}: {reason}")
        self.path = path
        self.line = line
        self.column = column


@dataclass(frozen=True)
class RecordError:
    file: str
    index: int
    reason: str

    def __str__(self) -> str:
        return f"{self.file}: result {self.index}: {self.reason}"


class Source(NamedTuple):
    statement: str
    method: str


@dataclass(frozen=True)
class FlowRecord:
    id: int
    sink_statement: str
    sink_method: str
    sources: tuple[Source, ...]
    source_file: str

    def __post_init__(self):
        if not self.sources:
            raise ValueError("a flow record needs at least one source")
        if not self.sink_statement or not self.sink_method:
            raise ValueError("sink statement and method must be non-empty")

    @property
    def ref(self) -> FlowRef:
        return FlowRef(self.source_file, self.id)


@dataclass(frozen=True)
class Unclassifiable:
    ref: FlowRef
    reason: str


# -- signatures ----------------------------------------------------------------

_SIG = re.compile(r"<([\w.$]+):\s+([\w.$\[\]]+)\s+([\w$<>]+)\(([^)]*)\)>")
_PARAM = re.compile(r"@parameter\d+:\s+([\w.$]+)")


class MethodSig(NamedTuple):
    class_name: str
    return_type: str
    name: str
    params: str

    @property
    def qualified(self) -> str:
        return f"{self.class_name}.{self.name}"


def parse_signature(text: str) -> MethodSig | None:
    """Recover the (first) Soot method signature inside a statement."""
    m = _SIG.search(text)
    if m:
        return MethodSig(*m.groups())
    m = _PARAM.search(text)
    if m:
        # callback parameter sources such as "@parameter0: android.location.Location"
        return MethodSig(m.group(1), m.group(1), "<parameter>", "")
    return None


# -- parsing -------------------------------------------------------------------


def display_path(path: str | Path) -> str:
    """Path used in provenance: relative to the working directory when possible."""
    p = Path(path)
    try:
        return p.resolve().relative_to(Path.cwd().resolve()).as_posix()
    except ValueError:
        return p.as_posix() if not p.is_absolute() else p.resolve().as_posix()


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _child(elem: ET.Element, name: str) -> ET.Element | None:
    return next((c for c in elem if _local(c.tag) == name), None)


def _children(elem: ET.Element, name: str) -> list[ET.Element]:
    return [c for c in elem if _local(c.tag) == name]


def parse_flowdroid_xml(path: str | Path, errors: list[RecordError] | None = None,
                        name: str | None = None) -> list[FlowRecord]:
    """Parse one FlowDroid results file.

    Results with a missing sink or sources become :class:`RecordError` entries
    in ``errors`` and parsing continues. Malformed XML raises
    :class:`FlowDroidParseError` carrying line and column.
    """
    name = name or display_path(path)
    errors = errors if errors is not None else []
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        line, col = exc.position
        raise FlowDroidParseError(name, line, col, f"malformed XML ({exc})") from exc
    version = root.get("FileFormatVersion")
    if version:
        logger.debug("%s: FlowDroid file format %s", name, version)

    results = _child(root, "Results")
    records: list[FlowRecord] = []
    if results is None:
        return records
    for index, result in enumerate(_children(results, "Result")):
        sink = _child(result, "Sink")
        if sink is None or not sink.get("Statement") or not sink.get("Method"):
            errors.append(RecordError(name, index, "missing sink (Statement and Method required)"))
            continue
        sources_el = _child(result, "Sources")
        sources = []
        if sources_el is not None:
            sources = [
                Source(s.get("Statement", ""), s.get("Method", ""))
                for s in _children(sources_el, "Source")
                if s.get("Statement")
            ]
        if not sources:
            errors.append(RecordError(name, index, "missing sources"))
            continue
        records.append(FlowRecord(index, sink.get("Statement"), sink.get("Method"), tuple(sources), name))
    return records


# -- rule tables ---------------------------------------------------------------


def _matches(pattern: str, qualified: str) -> bool:
    if pattern.endswith(".*"):
        return qualified.startswith(pattern[:-1])
    return qualified == pattern


@dataclass
class RuleTables:
    """Source -> data type, sink -> action and package prefix -> SDK tables."""

    sources: list[tuple[str, str]]
    sinks: list[tuple[str, Verb]]
    default_action: Verb
    vocab: Vocabulary = field(default_factory=get_vocabulary)

    @classmethod
    def load(cls, sources: str | Path | None = None, sinks: str | Path | None = None,
             vocab: Vocabulary | None = None) -> "RuleTables":
        vocab = vocab or get_vocabulary()
        src = load_data_file(sources or "sources.json")
        snk = load_data_file(sinks or "sinks.json")
        source_rules = [(r["pattern"], r["data"]) for r in src["rules"]]
        for _, type_id in source_rules:
            if type_id not in vocab.labels:
                raise VocabularyError(f"source table refers to unknown data type {type_id!r}")
        return cls(
            source_rules,
            [(r["pattern"], Verb(r["action"])) for r in snk["rules"]],
            Verb(snk.get("default_action", "collect")),
            vocab,
        )

    def data_for(self, sig: MethodSig | None) -> str | None:
        if sig is None:
            return None
        return next((d for p, d in self.sources if _matches(p, sig.qualified)), None)

    def action_for(self, sig: MethodSig | None) -> Verb:
        if sig is None:
            return self.default_action
        if self.vocab.sdk_for(sig.class_name):
            return Verb.SHARE
        return next((a for p, a in self.sinks if _matches(p, sig.qualified)), self.default_action)

    def actor_for(self, sink_method: MethodSig | None, callee: MethodSig | None) -> Actor:
        for sig in (sink_method, callee):
            if sig is not None:
                sdk = self.vocab.sdk_for(sig.class_name)
                if sdk:
                    return Actor(ActorKind.THIRD_PARTY, sdk)
        return FIRST_PARTY


# -- classification ------------------------------------------------------------


def _rule_triple(rec: FlowRecord, rules: RuleTables) -> Triple | Unclassifiable:
    callee = parse_signature(rec.sink_statement)
    container = parse_signature(rec.sink_method)
    data_id = next(
        (d for d in (rules.data_for(parse_signature(s.statement)) for s in rec.sources) if d), None
    )
    if data_id is None:
        return Unclassifiable(rec.ref, "no source maps to a known data type")
    action = Action(rules.action_for(callee))
    return Triple(rules.actor_for(container, callee), action, DataType(data_id), rec.ref)


def _llm_triple(rec: FlowRecord, client, rules: RuleTables) -> Triple | Unclassifiable:
    prompt = load_prompt("leak_map")
    text = prompt.render(
        sink=rec.sink_statement,
        sink_method=rec.sink_method,
        sources="\n".join(f"- {s.statement} (in {s.method})" for s in rec.sources),
        types=", ".join(rules.vocab.labels),
    )
    reply = client.complete(Stage.LEAK_MAP, text, prompt.ref).response
    try:
        obj = parse_json_reply(reply, dict)
        actor = normalize_actor(str(obj["actor"]), rules.vocab)
        action = normalize_action(str(obj["action"]), rules.vocab)
        data = normalize_data_type(str(obj["data"]), rules.vocab)
    except (MalformedReply, KeyError, ValueError, VocabularyError) as exc:
        return Unclassifiable(rec.ref, f"model reply rejected ({exc})")
    if action is None or action.negated:
        return Unclassifiable(rec.ref, f"model returned an invalid leak action {obj.get('action')!r}")
    if not isinstance(data, DataType):
        return Unclassifiable(rec.ref, f"model returned unmapped data {obj.get('data')!r}")
    return Triple(actor, action, data, rec.ref)


def classify_flow(rec: FlowRecord, rules: RuleTables | None = None, client=None,
                  llm_mode: str = "fallback") -> Triple | Unclassifiable:
    """Classify one flow.

    ``llm_mode`` picks when the model is consulted (only with a client):
    ``"fallback"`` when the rule tables cannot place the source,
    ``"override"`` for every flow, ``"off"`` never. A model answer that does
    not validate falls back to the rule-table result.
    """
    if llm_mode not in LLM_MODES:
        raise ValueError(f"llm_mode must be one of {LLM_MODES}")
    rules = rules or RuleTables.load()
    by_rules = _rule_triple(rec, rules)
    if client is None or llm_mode == "off":
        return by_rules
    if llm_mode == "fallback" and isinstance(by_rules, Triple):
        return by_rules
    by_model = _llm_triple(rec, client, rules)
    if isinstance(by_model, Unclassifiable) and isinstance(by_rules, Triple):
        return by_rules
    return by_model


@dataclass
class FileReport:
    path: str
    records: int = 0
    classified: int = 0
    record_errors: list[RecordError] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def extract_leak_kg(paths: Iterable[str | Path], rules: RuleTables | None = None, client=None,
                    llm_mode: str = "fallback", warnings: list[str] | None = None,
                    reports: list[FileReport] | None = None) -> KnowledgeGraph:
    paths = check_paths(list(paths), must_exist=False)
    rules = rules or RuleTables.load()
    warnings = warnings if warnings is not None else []
    reports = reports if reports is not None else []

    batches: list[tuple[FileReport, list[FlowRecord]]] = []
    for path in paths:
        report = FileReport(display_path(path))
        try:
            if not path.is_file():
                raise FlowDroidParseError(report.path, None, None, "file not found")
            records = parse_flowdroid_xml(path, report.record_errors, report.path)
        except FlowDroidParseError as exc:
            report.error = str(exc)
            warnings.append(str(exc))
            records = []
        report.records = len(records)
        warnings.extend(str(e) for e in report.record_errors)
        reports.append(report)
        batches.append((report, records))

    flat = [(report, rec) for report, recs in batches for rec in recs]

    def work(item):
        return classify_flow(item[1], rules, client, llm_mode)

    results = client.map(work, flat) if client is not None else [work(x) for x in flat]
    kg = KnowledgeGraph(KGKind.LEAK)
    for (report, rec), res in zip(flat, results):
        if isinstance(res, Unclassifiable):
            warnings.append(f"{res.ref}: unclassifiable flow ({res.reason})")
            continue
        report.classified += 1
        kg = kg.insert(res)
    for msg in warnings:
        logger.warning(msg)
    return kg


class LeakExtractor(TransformerMixin, BaseEstimator):
    """Transform FlowDroid result files into a LeakKG.

    ``transform(X)`` takes the list of XML paths of one app and returns a
    single graph; per-file summaries end up in ``reports_``.
    """

    def __init__(self, client=None, llm_mode="fallback", sources=None, sinks=None):
        self.client = client
        self.llm_mode = llm_mode
        self.sources = sources
        self.sinks = sinks

    def fit(self, X=None, y=None):
        if self.llm_mode not in LLM_MODES:
            raise ValueError(f"llm_mode must be one of {LLM_MODES}")
        self.rules_ = RuleTables.load(self.sources, self.sinks)
        return self

    def transform(self, X) -> KnowledgeGraph:
        check_is_fitted(self, "rules_")
        self.warnings_: list[str] = []
        self.reports_: list[FileReport] = []
        return extract_leak_kg(X, self.rules_, self.client, self.llm_mode, self.warnings_, self.reports_)
