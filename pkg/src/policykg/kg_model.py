"""Triple schema, controlled vocabularies and the knowledge-graph container.

Both the policy side and the leak side of the checker speak the same
``<actor, action, data>`` language. Everything in here is an immutable
value so graphs can be shared freely between threads.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Union

SCHEMA_KG = "policykg-kg/1"


class VocabularyError(ValueError):
    """Raised when a value falls outside a controlled vocabulary."""


class KindMismatchError(ValueError):
    """Raised when a triple's provenance style does not fit the graph kind."""


# -- vocabulary --------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9$_'\-]+")
_DETERMINERS = {
    "a", "an", "the", "your", "you", "user", "user's", "users", "users'",
    "any", "all", "such", "their", "his", "her", "my", "some", "certain",
    "personal", "device's", "this", "these", "those", "its",
}


def _clean(text: str) -> str:
    text = text.lower().replace("_", " ").replace("’", "'")
    return " ".join(_WORD.findall(text))


class Vocabulary:
    """Taxonomy plus synonym tables loaded from the ``data/`` files."""

    def __init__(self, taxonomy: dict, synonyms: dict, sdk_prefixes: dict):
        entries = taxonomy["data_types"]
        self.labels: dict[str, str] = {e["id"]: e["label"] for e in entries}
        if len(self.labels) != len(entries):
            raise VocabularyError("taxonomy contains duplicate ids")

        self.data_synonyms: dict[str, str] = {}
        for type_id, label in self.labels.items():
            self.data_synonyms[_clean(type_id)] = type_id
            self.data_synonyms[_clean(label)] = type_id
        for type_id, phrases in synonyms.get("data", {}).items():
            if type_id not in self.labels:
                raise VocabularyError(f"synonym table refers to unknown data type {type_id!r}")
            for phrase in phrases:
                self.data_synonyms.setdefault(_clean(phrase), type_id)
        # longest first so containment lookups prefer specific phrases
        self._data_phrases = sorted(self.data_synonyms, key=lambda p: (-len(p), p))

        self.verbs: dict[str, Verb] = {}
        for verb, words in synonyms.get("actions", {}).items():
            for word in words:
                self.verbs[_clean(word)] = Verb(verb)
        self.negation_cues: tuple[str, ...] = tuple(
            _clean(c) for c in synonyms.get("negation_cues", [])
        )
        self.first_party = {_clean(a) for a in synonyms.get("first_party", [])}
        self.third_party = {_clean(a) for a in synonyms.get("third_party", [])}

        self.sdk_prefixes: list[tuple[str, str]] = []
        self.sdk_aliases: dict[str, str] = {}
        for entry in sdk_prefixes.get("prefixes", []):
            self.sdk_prefixes.append((entry["prefix"], entry["name"]))
            self.sdk_aliases[_clean(entry["name"])] = entry["name"]
            for alias in entry.get("aliases", []):
                self.sdk_aliases[_clean(alias)] = entry["name"]
        self.sdk_prefixes.sort(key=lambda pn: -len(pn[0]))

    @classmethod
    def load(
        cls,
        taxonomy: str | Path | None = None,
        synonyms: str | Path | None = None,
        sdk_prefixes: str | Path | None = None,
    ) -> "Vocabulary":
        return cls(
            load_data_file(taxonomy or "taxonomy.json"),
            load_data_file(synonyms or "synonyms.json"),
            load_data_file(sdk_prefixes or "sdk_prefixes.json"),
        )

    def sdk_for(self, qualified_name: str) -> str | None:
        """Return the SDK name whose package prefix owns ``qualified_name``."""
        for prefix, name in self.sdk_prefixes:
            if qualified_name == prefix or qualified_name.startswith(prefix + "."):
                return name
        return None

    def has_negation_cue(self, text: str) -> bool:
        cleaned = f" {_clean(text)} "
        return any(f" {cue} " in cleaned for cue in self.negation_cues)


def load_data_file(name: str | Path) -> dict:
    """Load a JSON table, either a path on disk or a name under ``data/``."""
    path = Path(name)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    if path.parent != Path("."):
        raise FileNotFoundError(name)
    text = resources.files("policykg").joinpath("data", str(name)).read_text(encoding="utf-8")
    return json.loads(text)


_active: Vocabulary | None = None


def get_vocabulary() -> Vocabulary:
    global _active
    if _active is None:
        _active = Vocabulary.load()
    return _active


def set_vocabulary(vocab: Vocabulary | None) -> None:
    """Install ``vocab`` as the process-wide vocabulary (``None`` resets)."""
    global _active
    _active = vocab


# -- value types ---------------------------------------------------------------


class ActorKind(str, Enum):
    FIRST_PARTY = "first_party"
    THIRD_PARTY = "third_party"


@dataclass(frozen=True, order=True)
class Actor:
    kind: ActorKind
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActorKind(self.kind))
        if self.kind is ActorKind.FIRST_PARTY and self.name is not None:
            raise VocabularyError("first-party actor cannot carry a name")
        if self.name is not None:
            if not self.name or self.name != self.name.strip().lower():
                raise VocabularyError(f"third-party name must be trimmed lowercase: {self.name!r}")

    def covers(self, other: "Actor") -> bool:
        """True when this (policy) actor matches ``other`` (leak) actor.

        An unnamed third party in a policy stands for every third party.
        """
        if self.kind is not other.kind:
            return False
        if self.kind is ActorKind.THIRD_PARTY and self.name is None:
            return True
        return self.name == other.name

    def __str__(self) -> str:
        return self.kind.value if self.name is None else f"{self.kind.value}:{self.name}"

    @classmethod
    def parse(cls, text: str) -> "Actor":
        kind, _, name = text.partition(":")
        return cls(ActorKind(kind), name or None)


FIRST_PARTY = Actor(ActorKind.FIRST_PARTY)
THIRD_PARTY = Actor(ActorKind.THIRD_PARTY)


class Verb(str, Enum):
    COLLECT = "collect"
    SHARE = "share"


@dataclass(frozen=True, order=True)
class Action:
    verb: Verb
    negated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "verb", Verb(self.verb))
        object.__setattr__(self, "negated", bool(self.negated))

    def __str__(self) -> str:
        return f"not-{self.verb.value}" if self.negated else self.verb.value

    @classmethod
    def parse(cls, text: str) -> "Action":
        if text.startswith("not-"):
            return cls(Verb(text[4:]), True)
        return cls(Verb(text))


COLLECT = Action(Verb.COLLECT)
SHARE = Action(Verb.SHARE)
NOT_COLLECT = Action(Verb.COLLECT, True)
NOT_SHARE = Action(Verb.SHARE, True)
ALL_ACTIONS = (COLLECT, SHARE, NOT_COLLECT, NOT_SHARE)


def negate_action(a: Action) -> Action:
    return Action(a.verb, not a.negated)


@dataclass(frozen=True, order=True)
class DataType:
    id: str
    label: str = field(default="", compare=False)

    def __post_init__(self):
        labels = get_vocabulary().labels
        if self.id not in labels:
            raise VocabularyError(f"{self.id!r} is not in the data-type taxonomy")
        if not self.label:
            object.__setattr__(self, "label", labels[self.id])

    def __str__(self) -> str:
        return self.id


@dataclass(frozen=True)
class Unmapped:
    """Raw data text that no table entry (or model) could place."""

    raw: str


@dataclass(frozen=True, order=True)
class SegmentRef:
    """Provenance of a policy triple: sentence ``index`` of document ``doc``."""

    doc: str
    index: int

    def __str__(self) -> str:
        return f"{self.doc}#{self.index}"


@dataclass(frozen=True, order=True)
class FlowRef:
    """Provenance of a leak triple: FlowDroid ``record`` inside ``file``."""

    file: str
    record: int

    def __str__(self) -> str:
        return f"{self.file}#{self.record}"


Provenance = Union[SegmentRef, FlowRef]


@dataclass(frozen=True)
class Triple:
    actor: Actor
    action: Action
    data: DataType
    provenance: Provenance

    def __post_init__(self):
        if not isinstance(self.actor, Actor) or not isinstance(self.action, Action):
            raise TypeError("actor and action must be Actor and Action values")
        if not isinstance(self.data, DataType):
            raise TypeError(f"data must be a DataType, got {type(self.data).__name__}")
        if not isinstance(self.provenance, (SegmentRef, FlowRef)) or not str(self.provenance):
            raise ValueError("triple provenance must be a SegmentRef or FlowRef")

    @property
    def key(self) -> tuple[Actor, Action, DataType]:
        return (self.actor, self.action, self.data)

    def __str__(self) -> str:
        return f"<{self.actor}, {self.action}, {self.data}>"


# -- normalization -------------------------------------------------------------


def normalize_data_type(raw: str, vocab: Vocabulary | None = None, mapper=None) -> DataType | Unmapped:
    """Map free text onto the taxonomy.

    ``mapper`` is an optional callable ``raw -> type id | None`` (usually a
    model-backed lookup) consulted only when the synonym table fails.
    """
    if not raw or not raw.strip():
        raise ValueError("data type text must be non-empty")
    vocab = vocab or get_vocabulary()
    cleaned = _clean(raw)
    words = cleaned.split()
    while words and words[0] in _DETERMINERS:
        words.pop(0)
    candidates = [" ".join(words), cleaned]
    for text in candidates:
        if text in vocab.data_synonyms:
            return DataType(vocab.data_synonyms[text])
        if text.endswith("s") and text[:-1] in vocab.data_synonyms:
            return DataType(vocab.data_synonyms[text[:-1]])
    padded = f" {cleaned} "
    for phrase in vocab._data_phrases:
        if f" {phrase} " in padded:
            return DataType(vocab.data_synonyms[phrase])
    if mapper is not None:
        type_id = mapper(raw)
        if type_id in vocab.labels:
            return DataType(type_id)
    return Unmapped(raw)


def normalize_action(raw: str, vocab: Vocabulary | None = None) -> Action | None:
    """Map a verb phrase onto the four-value action vocabulary, or ``None``."""
    vocab = vocab or get_vocabulary()
    cleaned = _clean(raw.replace("-", " "))
    verb = next((vocab.verbs[w] for w in cleaned.split() if w in vocab.verbs), None)
    if verb is None:
        return None
    return Action(verb, vocab.has_negation_cue(cleaned))


def normalize_actor(raw: str, vocab: Vocabulary | None = None) -> Actor:
    vocab = vocab or get_vocabulary()
    text = raw.strip().lower()
    for tag in ("third_party:", "third-party:", "third party:"):
        if text.startswith(tag):
            name = _clean(text[len(tag):])
            if not name:
                return THIRD_PARTY
            return Actor(ActorKind.THIRD_PARTY, vocab.sdk_aliases.get(name, name))
    cleaned = _clean(text)
    if cleaned in vocab.first_party:
        return FIRST_PARTY
    if cleaned in vocab.third_party or not cleaned:
        return THIRD_PARTY
    if cleaned in vocab.sdk_aliases:
        return Actor(ActorKind.THIRD_PARTY, vocab.sdk_aliases[cleaned])
    if "third" in cleaned.split() or "third-party" in cleaned:
        return THIRD_PARTY
    return Actor(ActorKind.THIRD_PARTY, cleaned)


# -- knowledge graph ------------------------------------------------------------


class KGKind(str, Enum):
    POLICY = "PolicyKG"
    LEAK = "LeakKG"


_REF_FOR_KIND = {KGKind.POLICY: SegmentRef, KGKind.LEAK: FlowRef}


@dataclass(frozen=True)
class KnowledgeGraph:
    """Ordered, deduplicated triples.

    ``duplicates[i]`` holds the provenance of every later triple that was
    folded into ``triples[i]`` on insert, so nothing observed is lost.
    """

    kind: KGKind
    triples: tuple[Triple, ...] = ()
    duplicates: tuple[tuple[Provenance, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", KGKind(self.kind))
        object.__setattr__(self, "triples", tuple(self.triples))
        dups = tuple(tuple(d) for d in self.duplicates) or tuple(() for _ in self.triples)
        if len(dups) != len(self.triples):
            raise ValueError("duplicates must align with triples")
        object.__setattr__(self, "duplicates", dups)
        keys = [t.key for t in self.triples]
        if len(set(keys)) != len(keys):
            raise ValueError("knowledge graph contains duplicate triples")
        for t in self.triples:
            _check_kind(self.kind, t)

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self.triples)

    def __getitem__(self, i: int) -> Triple:
        return self.triples[i]

    def insert(self, t: Triple) -> "KnowledgeGraph":
        return kg_insert(self, t)

    def extend(self, triples: Iterable[Triple]) -> "KnowledgeGraph":
        kg = self
        for t in triples:
            kg = kg_insert(kg, t)
        return kg

    def provenances(self, i: int) -> tuple[Provenance, ...]:
        return (self.triples[i].provenance,) + self.duplicates[i]

    @classmethod
    def from_triples(cls, kind: KGKind, triples: Iterable[Triple]) -> "KnowledgeGraph":
        return cls(kind).extend(triples)


def _check_kind(kind: KGKind, t: Triple) -> None:
    if not isinstance(t.provenance, _REF_FOR_KIND[kind]):
        raise KindMismatchError(f"{type(t.provenance).__name__} provenance cannot enter a {kind.value}")
    if kind is KGKind.LEAK and t.action.negated:
        raise VocabularyError("leak triples are observed acts and cannot be negated")


def kg_insert(kg: KnowledgeGraph, t: Triple) -> KnowledgeGraph:
    _check_kind(kg.kind, t)
    for i, existing in enumerate(kg.triples):
        if existing.key == t.key:
            if t.provenance == existing.provenance or t.provenance in kg.duplicates[i]:
                return kg
            dups = list(kg.duplicates)
            dups[i] = dups[i] + (t.provenance,)
            return KnowledgeGraph(kg.kind, kg.triples, tuple(dups))
    return KnowledgeGraph(kg.kind, kg.triples + (t,), kg.duplicates + ((),))


# -- serialization --------------------------------------------------------------


def provenance_to_dict(p: Provenance) -> dict:
    if isinstance(p, SegmentRef):
        return {"doc": p.doc, "segment": p.index}
    return {"file": p.file, "record": p.record}


def provenance_from_dict(d: dict) -> Provenance:
    if "segment" in d:
        return SegmentRef(d["doc"], int(d["segment"]))
    return FlowRef(d["file"], int(d["record"]))


def triple_to_dict(t: Triple) -> dict:
    return {
        "actor": str(t.actor),
        "action": str(t.action),
        "data": t.data.id,
        "provenance": provenance_to_dict(t.provenance),
    }


def triple_from_dict(d: dict) -> Triple:
    return Triple(
        Actor.parse(d["actor"]),
        Action.parse(d["action"]),
        DataType(d["data"]),
        provenance_from_dict(d["provenance"]),
    )


def _record(kg: KnowledgeGraph, i: int) -> dict:
    rec = triple_to_dict(kg.triples[i])
    if kg.duplicates[i]:
        rec["duplicates"] = [provenance_to_dict(p) for p in kg.duplicates[i]]
    return rec


def _from_record(rec: dict) -> tuple[Triple, tuple[Provenance, ...]]:
    return triple_from_dict(rec), tuple(provenance_from_dict(p) for p in rec.get("duplicates", []))


def kg_to_dict(kg: KnowledgeGraph) -> dict:
    return {
        "schema": SCHEMA_KG,
        "kind": kg.kind.value,
        "triples": [_record(kg, i) for i in range(len(kg))],
    }


def kg_from_dict(d: dict) -> KnowledgeGraph:
    _check_schema(d)
    pairs = [_from_record(r) for r in d["triples"]]
    return KnowledgeGraph(KGKind(d["kind"]), [t for t, _ in pairs], [dup for _, dup in pairs])


def _check_schema(d: dict) -> None:
    if d.get("schema") != SCHEMA_KG:
        raise ValueError(f"unsupported knowledge-graph schema {d.get('schema')!r}")


def dumps_kg_lines(kg: KnowledgeGraph) -> str:
    lines = [json.dumps({"schema": SCHEMA_KG, "kind": kg.kind.value}, sort_keys=True)]
    lines += [json.dumps(_record(kg, i), sort_keys=True) for i in range(len(kg))]
    return "\n".join(lines) + "\n"


def loads_kg_lines(text: str) -> KnowledgeGraph:
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not rows:
        raise ValueError("empty knowledge-graph file")
    header, body = rows[0], rows[1:]
    _check_schema(header)
    pairs = [_from_record(r) for r in body]
    return KnowledgeGraph(KGKind(header["kind"]), [t for t, _ in pairs], [dup for _, dup in pairs])


def save_kg(kg: KnowledgeGraph, path: str | Path) -> None:
    """Write ``kg``; ``.jsonl`` selects the line format, anything else JSON."""
    path = Path(path)
    if path.suffix == ".jsonl":
        text = dumps_kg_lines(kg)
    else:
        text = json.dumps(kg_to_dict(kg), indent=2, sort_keys=True) + "\n"
    path.write_text(text, encoding="utf-8")


def load_kg(path: str | Path) -> KnowledgeGraph:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return loads_kg_lines(text)
    return kg_from_dict(json.loads(text))
