"""Regenerate ``tests/fixtures/replay/unit.jsonl``.

The unit tests replay a small set of exchanges. They are recorded here by
running the library calls the tests make against the corpus' scripted
stand-in, extended with a few extra sentence answers. Re-run after changing
a prompt template:

    python scripts/build_unit_fixtures.py
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))

from build_corpus import J, ScriptedModel  # noqa: E402

from policykg.baseline import run_baseline  # noqa: E402
from policykg.consistency_checker import check_all, render_reports  # noqa: E402
from policykg.kg_model import FIRST_PARTY, SHARE, COLLECT, NOT_SHARE, DataType, FlowRef, KGKind, \
    KnowledgeGraph, SegmentRef, Triple  # noqa: E402
from policykg.leak_extractor import extract_leak_kg  # noqa: E402
from policykg.llm_client import LLMClient, RecordBackend  # noqa: E402
from policykg.policy_reader import read_policy  # noqa: E402

FIXTURE = ROOT / "tests" / "fixtures" / "replay" / "unit.jsonl"
FLOWDROID = ROOT / "tests" / "fixtures" / "flowdroid"

# sentence -> answer; dict entries script a negation re-ask or a bad reply
ANSWERS = {
    "We never share your email address.": J(("first-party", "never share", "email address")),
    "Contact us anytime.": "[]",
    "We keep things tidy.": {"first": "Sorry, I cannot help with that.", "reformat": "still not JSON"},
    "We do not sell your location to advertisers.": {
        "first": J(("advertisers", "sell", "location")),
        "negation": J(("advertisers", "not-share", "location")),
    },
    "We collect your location.": J(("we", "collect", "location")),
    "We also gather GPS coordinates.": J(("we", "gather", "GPS coordinates")),
    "We record your favorite pizza topping.": J(("we", "record", "favorite pizza topping")),
}

class UnitModel(ScriptedModel):
    def answer(self, stage, prompt):
        if "Description: " in prompt:
            return "none"
        return super().answer(stage, prompt)


UNIT_POLICIES = {
    "never_email": "We never share your email address. Contact us anytime.",
    "bad_reply": "We keep things tidy.",
    "negation": "We do not sell your location to advertisers.",
    "dedupe": "We collect your location. We also gather GPS coordinates.",
    "unmapped": "We record your favorite pizza topping.",
}
BASELINE_POLICY = "We collect your location. We never share your location."


def record() -> None:
    FIXTURE.parent.mkdir(parents=True, exist_ok=True)
    FIXTURE.write_text("", encoding="utf-8")
    model = UnitModel()
    for sentence, entry in ANSWERS.items():
        model.policy[sentence] = entry
        if isinstance(entry, dict) and "reformat" in entry:
            model.reformat[entry["first"]] = entry["reformat"]
    client = LLMClient(RecordBackend(model, FIXTURE), parallelism=1)

    for doc_id, text in UNIT_POLICIES.items():
        read_policy(text, client, doc_id=doc_id, warnings=[])
    read_policy(UNIT_POLICIES["unmapped"], client, doc_id="unmapped", llm_data_mapping=True, warnings=[])

    # leak-map answers for every golden FlowDroid file (override mode asks for all)
    xmls = sorted(p for p in FLOWDROID.glob("*.xml") if p.name != "malformed.xml")
    extract_leak_kg(xmls, client=client, llm_mode="override", warnings=[])

    leak = KnowledgeGraph.from_triples(KGKind.LEAK, [
        Triple(FIRST_PARTY, SHARE, DataType("location"), FlowRef("a.xml", 0)),
        Triple(FIRST_PARTY, COLLECT, DataType("contact"), FlowRef("a.xml", 1)),
    ])
    policy = KnowledgeGraph.from_triples(KGKind.POLICY, [
        Triple(FIRST_PARTY, NOT_SHARE, DataType("location"), SegmentRef("p", 0)),
    ])
    render_reports(check_all(leak, policy), client, [])

    run_baseline(BASELINE_POLICY, [FLOWDROID / "single_flow.xml", FLOWDROID / "empty_results.xml",
                                   FLOWDROID / "multi_result.xml"], client, warnings=[])

    rows = [json.loads(l) for l in FIXTURE.read_text(encoding="utf-8").splitlines() if l.strip()]
    rows.sort(key=lambda r: (r["stage"], r["digest"]))
    FIXTURE.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    print(f"recorded {len(rows)} exchanges into {FIXTURE.relative_to(ROOT)}")


if __name__ == "__main__":
    record()
