import json
import random
import threading

import httpx
import pytest

from conftest import UNIT_REPLAY, FakeBackend
from policykg.llm_client import (
    ChatExchange,
    LiveBackend,
    LLMClient,
    LLMConfig,
    RecordBackend,
    ReplayBackend,
    ReplayMissError,
    Stage,
    TransportError,
    UsageLedger,
    build_backend,
    ledger_totals,
    load_fixtures,
    prompt_digest,
)


def _fixture_row(prompt, response, pt=7, ct=3, ms=120, stage="PolicyRead"):
    return {"digest": prompt_digest(prompt), "stage": stage, "prompt": prompt, "response": response,
            "prompt_tokens": pt, "completion_tokens": ct, "elapsed_ms": ms}


def test_replay_is_a_lookup():
    client = LLMClient(ReplayBackend({prompt_digest("P"): _fixture_row("P", "R")}))
    ex = client.complete(Stage.POLICY_READ, "P", "t@v1")
    assert (ex.response, ex.prompt_tokens, ex.completion_tokens, ex.elapsed_ms) == ("R", 7, 3, 120)
    assert client.ledger.exchanges == [ex]
    assert ex.template == "t@v1"


@pytest.mark.parametrize("prompt", ["", "  \n"])
def test_empty_prompt_is_rejected(prompt):
    client = LLMClient(ReplayBackend({}))
    with pytest.raises(ValueError):
        client.complete(Stage.REPORT, prompt)
    assert len(client.ledger) == 0


def test_replay_miss_names_stage_and_digest():
    client = LLMClient(ReplayBackend({}))
    with pytest.raises(ReplayMissError) as err:
        client.complete(Stage.LEAK_MAP, "unknown prompt")
    assert err.value.stage is Stage.LEAK_MAP
    assert err.value.digest == prompt_digest("unknown prompt")
    assert "LeakMap" in str(err.value) and err.value.digest[:16] in str(err.value)


def test_fixture_file_loads(tmp_path):
    table = load_fixtures([UNIT_REPLAY, tmp_path / "absent.jsonl"])
    assert len(table) == sum(1 for line in UNIT_REPLAY.read_text().splitlines() if line.strip())
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({**_fixture_row("x", "y"), "schema": "other/2"}) + "\n")
    with pytest.raises(ValueError):
        load_fixtures([bad])


def _ledger(pairs, stage=Stage.POLICY_READ):
    return UsageLedger([ChatExchange(stage, f"p{i}", "r", a, b, 10) for i, (a, b) in enumerate(pairs)])


def test_reported_hybrid_totals():
    report = ledger_totals(_ledger([(23668, 1432)]))
    assert report.overall.total_tokens == 25100


def test_empty_ledger_is_zero():
    report = ledger_totals(UsageLedger())
    assert report.per_stage == {}
    assert (report.overall.calls, report.overall.total_tokens, report.overall.elapsed_ms) == (0, 0, 0)


def test_two_exchanges():
    assert ledger_totals(_ledger([(10, 5), (20, 7)])).total_tokens == 42


def test_baseline_sized_ledger():
    # split the reported baseline prompt/completion totals over the three stages
    stages = [Stage.BASELINE_STAGE1, Stage.BASELINE_STAGE2, Stage.BASELINE_STAGE3]
    split = [(300000, 1000), (1134, 674), (80000, 1000)]
    ledger = UsageLedger([ChatExchange(s, f"p{i}", "r", a, b, 5) for i, (s, (a, b)) in enumerate(zip(stages, split))])
    report = ledger_totals(ledger)
    assert report.total_tokens == 383808
    assert (report.overall.prompt_tokens, report.overall.completion_tokens) == (381134, 2674)
    assert sum(c.total_tokens for c in report.per_stage.values()) == 383808


def test_random_ledgers_against_brute_force():
    rng = random.Random(11)
    stages = list(Stage)
    for _ in range(1000):
        rows = [(rng.choice(stages), rng.randint(0, 5000), rng.randint(0, 900), rng.randint(0, 9000))
                for _ in range(rng.randint(0, 25))]
        ledger = UsageLedger([ChatExchange(s, f"p{i}", "r", a, b, ms) for i, (s, a, b, ms) in enumerate(rows)])
        report = ledger_totals(ledger)
        prompt = completion = elapsed = 0
        for _, a, b, ms in rows:
            prompt += a
            completion += b
            elapsed += ms
        assert report.overall.prompt_tokens == prompt
        assert report.overall.completion_tokens == completion
        assert report.overall.elapsed_ms == elapsed
        assert report.overall.calls == len(rows)
        for stage, cost in report.per_stage.items():
            mine = [r for r in rows if r[0] is stage]
            assert cost.total_tokens == sum(a + b for _, a, b, _ in mine)


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ChatExchange(Stage.REPORT, "p", "r", -1, 0, 0)


def test_ledger_file_round_trip_and_order(tmp_path):
    ex = [ChatExchange(Stage.LEAK_MAP, "b", "r", 1, 2, 3), ChatExchange(Stage.POLICY_READ, "a", "s", 4, 5, 6)]
    a, b = UsageLedger(ex, 9, "replay"), UsageLedger(list(reversed(ex)), 9, "replay")
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    loaded = UsageLedger.load(tmp_path / "a.json")
    assert ledger_totals(loaded) == ledger_totals(a)
    assert loaded.clock == "replay" and loaded.wall_clock_ms == 9


def test_merge_sums_wall_clock():
    merged = UsageLedger([], 100).merge(UsageLedger([], 50))
    assert merged.wall_clock_ms == 150
    assert UsageLedger().merge(UsageLedger()).wall_clock_ms is None


def test_replay_is_deterministic(unit_client):
    rows = load_fixtures([UNIT_REPLAY])
    prompts = [(Stage(r["stage"]), r["prompt"]) for r in rows.values()]
    ledgers = []
    for _ in range(2):
        client = LLMClient(ReplayBackend([UNIT_REPLAY]), parallelism=4)
        with client.timed():
            client.map(lambda sp: client.complete(*sp), prompts)
        ledgers.append(json.dumps(client.ledger.to_dict(), sort_keys=True))
    assert ledgers[0] == ledgers[1]
    assert json.loads(ledgers[0])["wall_clock_ms"] == sum(r["elapsed_ms"] for r in rows.values())


def test_map_keeps_order_and_bounds_concurrency():
    live = []
    peak = []
    lock = threading.Lock()

    def reply(stage, prompt):
        with lock:
            live.append(1)
            peak.append(len(live))
        threading.Event().wait(0.01)
        with lock:
            live.pop()
        return prompt.upper()

    client = LLMClient(FakeBackend(reply), parallelism=3)
    out = client.map(lambda p: client.complete(Stage.REPORT, p).response, [f"p{i}" for i in range(20)])
    assert out == [f"P{i}" for i in range(20)]
    assert max(peak) <= 3
    assert len(client.ledger) == 20


# -- live backend over a mock transport ----------------------------------------------


def _ok(content="hello", pt=11, ct=2):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}],
                                     "usage": {"prompt_tokens": pt, "completion_tokens": ct}})


def test_live_backend_request_and_usage():
    seen = []

    def handler(request):
        seen.append(request)
        return _ok()

    backend = LiveBackend("http://model.test/v1/", "m1", api_key="k", transport=httpx.MockTransport(handler))
    out = backend.complete(Stage.POLICY_READ, "hi")
    assert (out.text, out.prompt_tokens, out.completion_tokens) == ("hello", 11, 2)
    body = json.loads(seen[0].content)
    assert str(seen[0].url) == "http://model.test/v1/chat/completions"
    assert body == {"model": "m1", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0}
    assert seen[0].headers["authorization"] == "Bearer k"


def test_live_backend_retries_transient_failures():
    replies = [httpx.Response(503), httpx.Response(429), _ok("fine")]

    def handler(request):
        return replies.pop(0)

    backend = LiveBackend("http://x", "m", transport=httpx.MockTransport(handler), max_retries=2, backoff=0)
    assert backend.complete(Stage.REPORT, "p").text == "fine"


def test_live_backend_gives_up_with_stage_tag():
    def handler(request):
        raise httpx.ConnectError("refused")

    backend = LiveBackend("http://x", "m", transport=httpx.MockTransport(handler), max_retries=1, backoff=0)
    with pytest.raises(TransportError) as err:
        backend.complete(Stage.LEAK_MAP, "p")
    assert err.value.stage is Stage.LEAK_MAP and "2 attempts" in str(err.value)


def test_live_backend_client_errors_are_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, text="bad key")

    backend = LiveBackend("http://x", "m", transport=httpx.MockTransport(handler), max_retries=3, backoff=0)
    with pytest.raises(TransportError):
        backend.complete(Stage.REPORT, "p")
    assert calls == [1]


def test_live_backend_bad_body():
    backend = LiveBackend("http://x", "m", transport=httpx.MockTransport(lambda r: httpx.Response(200, json={})),
                          backoff=0)
    with pytest.raises(TransportError):
        backend.complete(Stage.REPORT, "p")


def test_record_then_replay(tmp_path):
    path = tmp_path / "rec.jsonl"
    inner = FakeBackend(lambda stage, prompt: f"answer to {prompt}")
    recorder = LLMClient(RecordBackend(inner, path))
    for p in ["a", "b", "a"]:
        recorder.complete(Stage.POLICY_READ, p)
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["prompt"] for r in rows] == ["a", "b"]
    replay = LLMClient(ReplayBackend([path]))
    assert replay.complete(Stage.POLICY_READ, "b").response == "answer to b"
    assert ledger_totals(replay.ledger).total_tokens == ledger_totals(
        UsageLedger(recorder.ledger.exchanges[1:2])).total_tokens


def test_build_backend_config(tmp_path, monkeypatch):
    with pytest.raises(ValueError):
        LLMConfig(backend="carrier-pigeon")
    with pytest.raises(ValueError):
        LLMConfig(parallelism=0)
    with pytest.raises(ValueError):
        build_backend(LLMConfig(backend="replay"))
    assert isinstance(build_backend(LLMConfig(backend="replay", fixtures=[str(UNIT_REPLAY)])), ReplayBackend)
    rec = build_backend(LLMConfig(backend="record", record_to=str(tmp_path / "r.jsonl")))
    assert isinstance(rec, RecordBackend) and not rec.deterministic
    monkeypatch.setenv("POLICYKG_API_KEY", "secret")
    live = build_backend(LLMConfig())
    assert live._http.headers["authorization"] == "Bearer secret"
