"""Input validation shared by the estimators and the CLI."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .kg_model import KGKind, KnowledgeGraph, Triple


def check_text(doc: str, what: str = "document") -> str:
    if not isinstance(doc, str):
        raise TypeError(f"{what} must be str, got {type(doc).__name__}")
    if not doc.strip():
        raise ValueError(f"{what} is empty")
    return doc


def check_kg(kg: KnowledgeGraph, kind: KGKind, what: str = "graph") -> KnowledgeGraph:
    if not isinstance(kg, KnowledgeGraph):
        raise TypeError(f"{what} must be a KnowledgeGraph, got {type(kg).__name__}")
    if kg.kind is not KGKind(kind):
        raise ValueError(f"{what} must be a {KGKind(kind).value}, got {kg.kind.value}")
    return kg


def check_leak_triple(t: Triple) -> Triple:
    if not isinstance(t, Triple):
        raise TypeError(f"expected a Triple, got {type(t).__name__}")
    if t.action.negated:
        raise ValueError(f"leak triple {t} carries a negated action")
    return t


def check_paths(paths: Iterable[str | Path], must_exist: bool = True) -> list[Path]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    out = [Path(p) for p in paths]
    if not out:
        raise ValueError("at least one path is required")
    if must_exist:
        missing = [str(p) for p in out if not p.is_file()]
        if missing:
            raise FileNotFoundError(", ".join(missing))
    return out


def check_client(client, estimator: str):
    if client is None:
        raise ValueError(f"{estimator} needs an LLM client (live, record or replay backend)")
    if not hasattr(client, "complete"):
        raise TypeError(f"{estimator}: client has no complete() method")
    return client
