import json
import re
import shutil
from importlib import resources
from xml.dom import minidom

import pytest

from conftest import CORPUS, FLOWDROID, fake_client
from policykg.kg_model import COLLECT, FIRST_PARTY, SHARE, Actor, ActorKind, DataType, FlowRef, KGKind
from policykg.leak_extractor import (
    FlowDroidParseError,
    FlowRecord,
    LeakExtractor,
    RuleTables,
    Source,
    Unclassifiable,
    classify_flow,
    extract_leak_kg,
    parse_flowdroid_xml,
    parse_signature,
)

GOLDEN = sorted(FLOWDROID.glob("*.xml"))


def test_golden_fixture_set_covers_documented_paths():
    names = {p.stem for p in GOLDEN}
    assert {"single_flow", "multi_source", "empty_results", "malformed", "missing_sink", "multi_result",
            "missing_sources", "no_results_element"} <= names


@pytest.mark.parametrize("path", GOLDEN, ids=lambda p: p.stem)
def test_golden_ingestion(path):
    expected = json.loads(path.with_suffix(".expected.json").read_text())
    errors = []
    if "parse_error" in expected:
        with pytest.raises(FlowDroidParseError) as err:
            parse_flowdroid_xml(path, errors, path.name)
        assert (err.value.line, err.value.column) == (expected["parse_error"]["line"],
                                                      expected["parse_error"]["column"])
        assert f"{path.name}:{err.value.line}:{err.value.column}" in str(err.value)
        return
    records = parse_flowdroid_xml(path, errors, path.name)
    got = [{"id": r.id, "sink_method": r.sink_method, "sources": len(r.sources),
            "triple": None if isinstance(t := classify_flow(r), Unclassifiable) else str(t)} for r in records]
    assert got == expected["records"]
    assert [{"index": e.index, "reason": e.reason} for e in errors] == expected["errors"]


def test_single_flow_record_fields():
    (rec,) = parse_flowdroid_xml(FLOWDROID / "single_flow.xml", name="single_flow.xml")
    assert rec.id == 0 and len(rec.sources) == 1
    assert rec.sink_statement.startswith("virtualinvoke $r4.<java.net.HttpURLConnection")
    assert rec.ref == FlowRef("single_flow.xml", 0)


@pytest.mark.parametrize("path", [p for p in GOLDEN if p.stem != "malformed"], ids=lambda p: p.stem)
def test_parsing_is_idempotent(path):
    assert parse_flowdroid_xml(path) == parse_flowdroid_xml(path)


def test_flow_record_invariants():
    with pytest.raises(ValueError):
        FlowRecord(0, "stmt", "<a.B: void c()>", (), "f.xml")
    with pytest.raises(ValueError):
        FlowRecord(0, "", "<a.B: void c()>", (Source("s", "m"),), "f.xml")


def test_signature_parsing():
    sig = parse_signature("$r2 = virtualinvoke $r1.<android.location.LocationManager: "
                          "android.location.Location getLastKnownLocation(java.lang.String)>(\"gps\")")
    assert sig.qualified == "android.location.LocationManager.getLastKnownLocation"
    assert parse_signature("$r1 := @parameter0: android.location.Location").class_name == "android.location.Location"
    assert parse_signature("nop") is None


# -- classification -----------------------------------------------------------------


def _rec(source_stmt, sink_stmt, sink_method="<com.example.app.Main: void run()>", i=0, file="f.xml"):
    return FlowRecord(i, sink_stmt, sink_method, (Source(source_stmt, sink_method),), file)


LOCATION = "$r2 = virtualinvoke $r1.<android.location.LocationManager: android.location.Location getLastKnownLocation(java.lang.String)>(\"gps\")"
DEVICE_ID = "$r3 = virtualinvoke $r2.<android.telephony.TelephonyManager: java.lang.String getDeviceId()>()"
HTTP = "virtualinvoke $r4.<java.net.HttpURLConnection: void setRequestProperty(java.lang.String,java.lang.String)>(\"X\", $r2)"
LOG = "staticinvoke <android.util.Log: int d(java.lang.String,java.lang.String)>(\"t\", $r3)"
UNKNOWN = "$r3 = virtualinvoke $r2.<com.example.app.Secret: java.lang.String token()>()"


def test_location_to_network_is_first_party_share():
    assert classify_flow(_rec(LOCATION, HTTP)).key == (FIRST_PARTY, SHARE, DataType("location"))


def test_device_id_to_log_is_first_party_collect():
    assert classify_flow(_rec(DEVICE_ID, LOG)).key == (FIRST_PARTY, COLLECT, DataType("device_id"))


def test_unknown_source_without_model_is_unclassifiable():
    out = classify_flow(_rec(UNKNOWN, LOG))
    assert isinstance(out, Unclassifiable) and out.ref == FlowRef("f.xml", 0)


def test_sdk_code_is_the_actor():
    # a flow that lives inside SDK code is the SDK collecting
    out = classify_flow(_rec(DEVICE_ID, LOG, sink_method="<com.facebook.internal.Utility: void log()>"))
    assert out.key == (Actor(ActorKind.THIRD_PARTY, "facebook"), COLLECT, DataType("device_id"))
    # handing data to an SDK API from app code is sharing with it
    sdk_call = "staticinvoke <com.facebook.appevents.AppEventsLogger: void setUserID(java.lang.String)>($r3)"
    out = classify_flow(_rec(DEVICE_ID, sdk_call))
    assert out.key == (Actor(ActorKind.THIRD_PARTY, "facebook"), SHARE, DataType("device_id"))


def test_rule_classification_is_pure():
    rec = _rec(LOCATION, HTTP)
    rules = RuleTables.load()
    assert classify_flow(rec, rules) == classify_flow(rec, rules) == classify_flow(rec, RuleTables.load())


def test_model_fallback_places_unknown_source():
    answer = '{"actor": "first_party", "action": "collect", "data": "contacts"}'
    client = fake_client(lambda stage, prompt: answer)
    out = classify_flow(_rec(UNKNOWN, LOG), client=client)
    assert out.key == (FIRST_PARTY, COLLECT, DataType("contact"))
    # rules win in fallback mode, so the model is not asked for a known source
    classify_flow(_rec(LOCATION, HTTP), client=client)
    assert len(client.ledger) == 1


@pytest.mark.parametrize("answer", [
    '{"actor": "first_party", "action": "not-share", "data": "location"}',
    '{"actor": "first_party", "action": "collect", "data": "shoe size"}',
    '{"actor": "first_party", "action": "ponder", "data": "location"}',
    "no idea",
])
def test_invalid_model_answers_are_rejected(answer):
    out = classify_flow(_rec(UNKNOWN, LOG), client=fake_client(lambda s, p: answer))
    assert isinstance(out, Unclassifiable)


def test_override_mode_keeps_rules_when_model_fails():
    out = classify_flow(_rec(LOCATION, HTTP), client=fake_client(lambda s, p: "nonsense"), llm_mode="override")
    assert out.key == (FIRST_PARTY, SHARE, DataType("location"))
    with pytest.raises(ValueError):
        classify_flow(_rec(LOCATION, HTTP), llm_mode="sometimes")


def test_replayed_override_run_matches_rules(unit_client):
    xmls = [p for p in GOLDEN if p.stem != "malformed"]
    assert extract_leak_kg(xmls, client=unit_client, llm_mode="override") == extract_leak_kg(xmls)


# -- graphs --------------------------------------------------------------------------


def test_same_triple_across_files_dedupes(tmp_path):
    for name in ("a.xml", "b.xml"):
        shutil.copy(FLOWDROID / "single_flow.xml", tmp_path / name)
    kg = extract_leak_kg([tmp_path / "a.xml", tmp_path / "b.xml"])
    assert len(kg) == 1 and len(kg.provenances(0)) == 2


def test_all_unclassifiable_gives_empty_graph_and_warnings(tmp_path):
    text = (FLOWDROID / "multi_result.xml").read_text()
    doc = minidom.parseString(text.encode())
    results = doc.getElementsByTagName("Result")
    for r in results[:3]:
        r.parentNode.removeChild(r)
    (tmp_path / "only_unknown.xml").write_text(doc.toxml())
    warnings = []
    kg = extract_leak_kg([tmp_path / "only_unknown.xml"], warnings=warnings)
    assert len(kg) == 0 and kg.kind is KGKind.LEAK
    assert any("unclassifiable" in w for w in warnings)


def test_partial_failures_are_reported():
    warnings, reports = [], []
    kg = extract_leak_kg([FLOWDROID / "malformed.xml", FLOWDROID / "missing_sink.xml", FLOWDROID / "absent.xml"],
                         warnings=warnings, reports=reports)
    assert len(kg) == 2
    assert [r.ok for r in reports] == [False, True, False]
    assert reports[1].records == 2 and len(reports[1].record_errors) == 1
    assert sum("file not found" in w for w in warnings) == 1


def test_leak_actions_are_never_negated():
    kg = extract_leak_kg(sorted(CORPUS.glob("apps/*/flows/*.xml")))
    assert kg and all(not t.action.negated for t in kg)


def test_estimator_interface():
    est = LeakExtractor(llm_mode="off").fit()
    kg = est.transform([FLOWDROID / "single_flow.xml", FLOWDROID / "multi_result.xml"])
    assert len(kg) == 4
    assert [r.classified for r in est.reports_] == [1, 3]
    with pytest.raises(ValueError):
        LeakExtractor(llm_mode="bad").fit()


# -- corpus count against an independent script ------------------------------------------------


_CALL = re.compile(r"<([\w.$]+): [^ ]+ ([\w$<>]+)\(")


def _independent_triples(paths):
    """Classify every flow with minidom and the raw JSON tables."""
    data_dir = resources.files("policykg") / "data"
    sources = json.loads((data_dir / "sources.json").read_text())["rules"]
    sinks = json.loads((data_dir / "sinks.json").read_text())
    sdks = json.loads((data_dir / "sdk_prefixes.json").read_text())["prefixes"]

    def owner(cls):
        hits = [e for e in sdks if cls == e["prefix"] or cls.startswith(e["prefix"] + ".")]
        return max(hits, key=lambda e: len(e["prefix"]))["name"] if hits else None

    def match(pattern, cls, name):
        full = f"{cls}.{name}"
        return full.startswith(pattern[:-1]) if pattern.endswith(".*") else full == pattern

    triples = set()
    for path in paths:
        for result in minidom.parse(str(path)).getElementsByTagName("Result"):
            sink = result.getElementsByTagName("Sink")
            srcs = result.getElementsByTagName("Source")
            if not sink or not srcs or not sink[0].getAttribute("Statement"):
                continue
            data = None
            for s in srcs:
                stmt = s.getAttribute("Statement")
                m = _CALL.search(stmt)
                if m:
                    data = next((r["data"] for r in sources if match(r["pattern"], *m.groups())), None)
                else:
                    p = re.search(r"@parameter\d+: ([\w.$]+)", stmt)
                    if p:
                        data = next((r["data"] for r in sources if match(r["pattern"], p.group(1), "<parameter>")),
                                    None)
                if data:
                    break
            if data is None:
                continue
            callee = _CALL.search(sink[0].getAttribute("Statement"))
            container = _CALL.search(sink[0].getAttribute("Method"))
            sdk = next((owner(m.group(1)) for m in (container, callee) if m and owner(m.group(1))), None)
            if callee and owner(callee.group(1)):
                action = "share"
            elif callee:
                action = next((r["action"] for r in sinks["rules"] if match(r["pattern"], *callee.groups())),
                              sinks["default_action"])
            else:
                action = sinks["default_action"]
            triples.add((f"third_party:{sdk}" if sdk else "first_party", action, data))
    return triples


def test_corpus_leak_graph_matches_independent_count():
    paths = sorted(CORPUS.glob("apps/*/flows/*.xml"))
    assert len(paths) >= 17
    kg = extract_leak_kg(paths)
    mine = {(str(t.actor), str(t.action), t.data.id) for t in kg}
    assert len(mine) == len(kg)
    assert mine == _independent_triples(paths)
