"""Policy text -> PolicyKG.

The document is split into sentences, each sentence is sent to the model
separately, and the returned candidates are normalized into the controlled
vocabularies before being inserted into the graph in document order.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from html.parser import HTMLParser
from typing import Iterable, NamedTuple

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .kg_model import (
    KGKind,
    KnowledgeGraph,
    SegmentRef,
    Triple,
    Unmapped,
    Vocabulary,
    get_vocabulary,
    normalize_action,
    normalize_actor,
    normalize_data_type,
)
from .llm_client import Stage
from .prompts import load_prompt
from .replies import MalformedReply, parse_json_reply
from .validation import check_client, check_text

logger = logging.getLogger(__name__)

CANDIDATE_SHAPE = '[{"actor": "...", "action": "...", "data": "..."}]'


@dataclass(frozen=True)
class PolicySegment:
    index: int
    text: str
    char_span: tuple[int, int]


class RawCandidate(NamedTuple):
    actor: str
    action: str
    data: str


# -- html --------------------------------------------------------------------


_INLINE = {"a", "abbr", "b", "cite", "code", "em", "i", "mark", "q", "s", "small", "span", "strong", "sub",
           "sup", "u"}


class _TextOnly(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip = 0

    def handle_starttag(self, tag, attrs):
        if tag in ("script", "style"):
            self._skip += 1
        if tag not in _INLINE:
            self.parts.append(" ")

    def handle_endtag(self, tag):
        if tag in ("script", "style") and self._skip:
            self._skip -= 1
        if tag not in _INLINE:
            self.parts.append(" ")

    def handle_data(self, data):
        if not self._skip:
            self.parts.append(data)


def strip_html(doc: str) -> str:
    parser = _TextOnly()
    parser.feed(doc)
    parser.close()
    return " ".join("".join(parser.parts).split())


# -- segmentation --------------------------------------------------------------

_ABBREVIATIONS = ("e.g.", "i.e.", "etc.", "inc.", "ltd.", "co.", "mr.", "ms.", "dr.", "vs.", "u.s.", "no.")
_BOUNDARY = re.compile(r"[.!?]+[\"')\]]*(?=\s|$)|\n\s*\n")


def segment_policy(doc: str) -> list[PolicySegment]:
    """Split ``doc`` into sentences (and paragraphs) with character spans."""
    check_text(doc, "policy document")
    segments: list[PolicySegment] = []
    start = 0

    def emit(end: int) -> None:
        chunk = doc[start:end]
        lead = len(chunk) - len(chunk.lstrip())
        text = chunk.strip()
        if text:
            s = start + lead
            segments.append(PolicySegment(len(segments), text, (s, s + len(text))))

    for m in _BOUNDARY.finditer(doc):
        end = m.end()
        if m.group().strip():
            word = doc[start:end].split()[-1].lower() if doc[start:end].split() else ""
            if word.endswith(_ABBREVIATIONS) and not _ends_paragraph(doc, end):
                continue
        emit(end)
        start = end
    emit(len(doc))
    return segments


def _ends_paragraph(doc: str, end: int) -> bool:
    rest = doc[end:]
    return not rest.strip() or rest.lstrip(" \t").startswith("\n")


# -- extraction ----------------------------------------------------------------


def _parse_candidates(reply: str) -> list[RawCandidate]:
    items = parse_json_reply(reply, list)
    out = []
    for item in items:
        if not isinstance(item, dict):
            raise MalformedReply(f"candidate is not an object: {item!r}")
        try:
            values = [item[k] for k in ("actor", "action", "data")]
        except KeyError as exc:
            raise MalformedReply(f"candidate lacks key {exc}") from exc
        if not all(isinstance(v, str) and v.strip() for v in values):
            raise MalformedReply(f"candidate has empty or non-text slots: {item!r}")
        out.append(RawCandidate(*(v.strip() for v in values)))
    return out


def _ask(client, stage: Stage, prompt_name: str, warnings: list[str], label: str, **values):
    """One prompt plus at most one reformat retry; ``None`` when both fail."""
    prompt = load_prompt(prompt_name)
    reply = client.complete(stage, prompt.render(**values), prompt.ref).response
    try:
        return _parse_candidates(reply)
    except MalformedReply:
        fix = load_prompt("reformat")
        reply = client.complete(stage, fix.render(shape=CANDIDATE_SHAPE, previous=reply), fix.ref).response
        try:
            return _parse_candidates(reply)
        except MalformedReply as exc:
            warnings.append(f"{label}: malformed model reply after retry ({exc})")
            return None


class _LoggingList(list):
    def append(self, msg):
        logger.warning(msg)
        super().append(msg)


def extract_candidates(seg: PolicySegment, client, *, negation_check: bool = True,
                       vocab: Vocabulary | None = None, warnings: list[str] | None = None) -> list[RawCandidate]:
    """Ask the model for the data practices stated in one segment."""
    vocab = vocab or get_vocabulary()
    if warnings is None:
        warnings = _LoggingList()
    label = f"segment {seg.index}"
    found = _ask(client, Stage.POLICY_READ, "policy_extract", warnings, label, segment=seg.text)
    if found is None:
        return []
    if negation_check and found and vocab.has_negation_cue(seg.text):
        affirmed = [c for c in found if not ((a := normalize_action(c.action, vocab)) and a.negated)]
        if affirmed:
            previous = json.dumps([c._asdict() for c in found])
            again = _ask(client, Stage.POLICY_READ, "policy_negation", warnings, label,
                         segment=seg.text, previous=previous)
            if again is not None:
                found = again
    return found


def llm_data_mapper(client, stage: Stage, vocab: Vocabulary | None = None):
    """Build a ``raw -> type id | None`` callable backed by the model."""
    vocab = vocab or get_vocabulary()
    prompt = load_prompt("data_map")
    types = ", ".join(vocab.labels)

    def mapper(raw: str) -> str | None:
        reply = client.complete(stage, prompt.render(raw=raw, types=types), prompt.ref).response
        answer = reply.strip().strip("\"'`.").lower()
        return answer if answer in vocab.labels else None

    return mapper


def candidates_to_triples(candidates: Iterable[RawCandidate], ref: SegmentRef, *, vocab: Vocabulary | None = None,
                          mapper=None, warnings: list[str] | None = None) -> list[Triple]:
    vocab = vocab or get_vocabulary()
    warnings = warnings if warnings is not None else []
    triples = []
    for cand in candidates:
        action = normalize_action(cand.action, vocab)
        if action is None:
            warnings.append(f"{ref}: dropped candidate with unknown action {cand.action!r}")
            continue
        data = normalize_data_type(cand.data, vocab, mapper)
        if isinstance(data, Unmapped):
            warnings.append(f"{ref}: dropped candidate with unmapped data type {data.raw!r}")
            continue
        triples.append(Triple(normalize_actor(cand.actor, vocab), action, data, ref))
    return triples


def read_policy(doc: str, client, *, doc_id: str = "policy", negation_check: bool = True,
                llm_data_mapping: bool = False, vocab: Vocabulary | None = None,
                warnings: list[str] | None = None) -> KnowledgeGraph:
    vocab = vocab or get_vocabulary()
    warnings = warnings if warnings is not None else []
    segments = segment_policy(doc)
    mapper = llm_data_mapper(client, Stage.POLICY_READ, vocab) if llm_data_mapping else None

    def work(seg: PolicySegment) -> tuple[list[Triple], list[str]]:
        local: list[str] = []
        cands = extract_candidates(seg, client, negation_check=negation_check, vocab=vocab, warnings=local)
        triples = candidates_to_triples(cands, SegmentRef(doc_id, seg.index), vocab=vocab, mapper=mapper,
                                        warnings=local)
        return triples, local

    kg = KnowledgeGraph(KGKind.POLICY)
    for triples, local in client.map(work, segments):
        kg = kg.extend(triples)
        for msg in local:
            logger.warning(msg)
        warnings.extend(local)
    return kg


class PolicyReader(TransformerMixin, BaseEstimator):
    """Transform policy documents into PolicyKGs.

    ``X`` is an iterable of documents, either plain strings or
    ``(doc_id, text)`` pairs. ``transform`` returns one graph per document
    and keeps the dropped-candidate messages in ``warnings_``.
    """

    def __init__(self, client=None, negation_check=True, llm_data_mapping=False, html=False):
        self.client = client
        self.negation_check = negation_check
        self.llm_data_mapping = llm_data_mapping
        self.html = html

    def fit(self, X=None, y=None):
        check_client(self.client, type(self).__name__)
        self.vocabulary_ = get_vocabulary()
        return self

    def transform(self, X) -> list[KnowledgeGraph]:
        check_is_fitted(self, "vocabulary_")
        self.warnings_: list[str] = []
        graphs = []
        for i, item in enumerate(X):
            doc_id, text = item if isinstance(item, tuple) else (f"policy{i}", item)
            if self.html:
                text = strip_html(text)
            graphs.append(read_policy(
                text, self.client, doc_id=doc_id, negation_check=self.negation_check,
                llm_data_mapping=self.llm_data_mapping, vocab=self.vocabulary_, warnings=self.warnings_,
            ))
        return graphs
