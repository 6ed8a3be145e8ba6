from __future__ import annotations

import math
import socket
from pathlib import Path

import pytest

from policykg import prompts
from policykg.kg_model import set_vocabulary
from policykg.llm_client import Completion, LLMClient, ReplayBackend

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).resolve().parent / "fixtures"
FLOWDROID = FIXTURES / "flowdroid"
UNIT_REPLAY = FIXTURES / "replay" / "unit.jsonl"
CORPUS = ROOT / "corpus"


class FakeBackend:
    """Answers through ``reply(stage, prompt)``; counts tokens like the
    recorded fixtures do."""

    deterministic = True

    def __init__(self, reply):
        self.reply = reply
        self.prompts: list[str] = []

    def complete(self, stage, prompt):
        self.prompts.append(prompt)
        text = self.reply(stage, prompt)
        if isinstance(text, Exception):
            raise text
        return Completion(text, math.ceil(len(prompt) / 4), math.ceil(len(text) / 4), 100)


def fake_client(reply, parallelism: int = 1) -> LLMClient:
    return LLMClient(FakeBackend(reply), parallelism=parallelism)


@pytest.fixture
def unit_client() -> LLMClient:
    return LLMClient(ReplayBackend([UNIT_REPLAY]), parallelism=1)


@pytest.fixture(autouse=True)
def _reset_globals():
    yield
    set_vocabulary(None)
    prompts.use_version(prompts.DEFAULT_VERSION)


@pytest.fixture
def no_network(monkeypatch):
    """Any attempt to open a socket fails the test."""

    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted during a replay run")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    monkeypatch.setattr("httpx.Client.send", refuse)
