import json
import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fake_client
from policykg.kg_model import (
    COLLECT,
    FIRST_PARTY,
    NOT_SHARE,
    THIRD_PARTY,
    DataType,
    KGKind,
    KnowledgeGraph,
    SegmentRef,
    Triple,
)
from policykg.llm_client import Stage
from policykg.policy_reader import (
    PolicyReader,
    PolicySegment,
    RawCandidate,
    candidates_to_triples,
    extract_candidates,
    read_policy,
    segment_policy,
    strip_html,
)

# -- segmentation ------------------------------------------------------------------


def test_two_sentences():
    segs = segment_policy("We collect location. We never share email.")
    assert [s.text for s in segs] == ["We collect location.", "We never share email."]


def test_unterminated_clause_is_one_segment():
    assert [s.text for s in segment_policy("we collect your location")] == ["we collect your location"]


def test_empty_document_rejected():
    with pytest.raises(ValueError):
        segment_policy("   ")


def test_abbreviations_do_not_split():
    segs = segment_policy("We collect identifiers, e.g. the IMEI. We share nothing.")
    assert len(segs) == 2


def test_paragraph_break_splits_headings():
    segs = segment_policy("Data we collect\n\nWe collect location.")
    assert [s.text for s in segs] == ["Data we collect", "We collect location."]


def _naive_split(doc):
    """Oracle: split after every run of terminal punctuation followed by space."""
    return [p.strip() for p in re.split(r"(?<=[.!?])\s+", doc.strip()) if p.strip()]


_words = st.text(alphabet="abcdefghij ,", min_size=1, max_size=30).filter(lambda s: s.strip(" ,"))


@given(st.lists(st.tuples(_words, st.sampled_from([".", "!", "?", "..."])), min_size=1, max_size=12),
       st.sampled_from([" ", "  ", "\n", " \t"]))
def test_segments_agree_with_naive_oracle(sentences, gap):
    doc = gap.join(w.strip(" ,") + end for w, end in sentences)
    segs = segment_policy(doc)
    assert [s.text for s in segs] == _naive_split(doc)
    # spans are ordered, disjoint and cover every non-space character
    last = 0
    for s in segs:
        a, b = s.char_span
        assert a >= last and doc[a:b] == s.text
        assert not doc[last:a].strip()
        last = b
    assert not doc[last:].strip()


# -- candidate extraction ----------------------------------------------------------


def test_extract_never_share(unit_client):
    seg = segment_policy("We never share your email address. Contact us anytime.")[0]
    assert extract_candidates(seg, unit_client) == [RawCandidate("first-party", "never share", "email address")]


def test_extract_no_practice(unit_client):
    seg = segment_policy("We never share your email address. Contact us anytime.")[1]
    assert extract_candidates(seg, unit_client, warnings=[]) == []


def test_malformed_twice_gives_empty_and_warning(unit_client):
    warnings = []
    seg = segment_policy("We keep things tidy.")[0]
    assert extract_candidates(seg, unit_client, warnings=warnings) == []
    assert len(warnings) == 1 and "malformed" in warnings[0]
    assert [e.template for e in unit_client.ledger.exchanges] == ["policy_extract@v1", "reformat@v1"]


def test_malformed_then_fixed():
    replies = iter(["sure! here you go", '[{"actor": "we", "action": "collect", "data": "sms"}]'])
    client = fake_client(lambda stage, prompt: next(replies))
    seg = PolicySegment(0, "We read SMS.", (0, 12))
    assert extract_candidates(seg, client) == [RawCandidate("we", "collect", "sms")]


def test_negation_is_re_asked(unit_client):
    seg = segment_policy("We do not sell your location to advertisers.")[0]
    cands = extract_candidates(seg, unit_client)
    assert cands == [RawCandidate("advertisers", "not-share", "location")]
    assert [e.template for e in unit_client.ledger.exchanges] == ["policy_extract@v1", "policy_negation@v1"]


def test_negation_check_can_be_disabled(unit_client):
    seg = segment_policy("We do not sell your location to advertisers.")[0]
    assert extract_candidates(seg, unit_client, negation_check=False) == [
        RawCandidate("advertisers", "sell", "location")]


def test_no_re_ask_when_answer_already_negated(unit_client):
    seg = segment_policy("We never share your email address.")[0]
    extract_candidates(seg, unit_client)
    assert len(unit_client.ledger) == 1


def test_fenced_json_reply_is_accepted():
    reply = 'Here:\n```json\n[{"actor": "partners", "action": "receive", "data": "contacts"}]\n```'
    seg = PolicySegment(0, "Partners receive contacts.", (0, 26))
    assert extract_candidates(seg, fake_client(lambda s, p: reply)) == [
        RawCandidate("partners", "receive", "contacts")]


# -- triples and graphs ----------------------------------------------------------------


def test_read_policy_never_share(unit_client):
    kg = read_policy("We never share your email address. Contact us anytime.", unit_client, doc_id="never_email")
    assert list(kg) == [Triple(FIRST_PARTY, NOT_SHARE, DataType("email_address"), SegmentRef("never_email", 0))]


def test_empty_candidates_give_empty_graph():
    assert candidates_to_triples([], SegmentRef("d", 0)) == []
    kg = read_policy("Contact us anytime.", fake_client(lambda s, p: "[]"))
    assert kg == KnowledgeGraph(KGKind.POLICY)


def test_duplicate_sentences_collapse(unit_client):
    kg = read_policy("We collect your location. We also gather GPS coordinates.", unit_client, doc_id="dedupe")
    assert len(kg) == 1
    assert kg[0].key == (FIRST_PARTY, COLLECT, DataType("location"))
    assert kg.provenances(0) == (SegmentRef("dedupe", 0), SegmentRef("dedupe", 1))


def test_negation_reaches_the_graph(unit_client):
    kg = read_policy("We do not sell your location to advertisers.", unit_client, doc_id="negation")
    assert [t.key for t in kg] == [(THIRD_PARTY, NOT_SHARE, DataType("location"))]


def test_unmapped_data_is_dropped_with_warning(unit_client):
    warnings = []
    kg = read_policy("We record your favorite pizza topping.", unit_client, doc_id="unmapped", warnings=warnings)
    assert len(kg) == 0
    assert "unmapped data type 'favorite pizza topping'" in warnings[0]


def test_llm_data_mapping_is_consulted(unit_client):
    warnings = []
    kg = read_policy("We record your favorite pizza topping.", unit_client, doc_id="unmapped",
                     llm_data_mapping=True, warnings=warnings)
    assert len(kg) == 0
    assert [e.template for e in unit_client.ledger.exchanges] == ["policy_extract@v1", "data_map@v1"]


def test_unknown_action_is_dropped():
    warnings = []
    out = candidates_to_triples([RawCandidate("we", "admire", "location")], SegmentRef("d", 0), warnings=warnings)
    assert out == [] and "unknown action" in warnings[0]


def test_provenance_in_range():
    doc = " ".join(f"We collect your location {i}." for i in range(9))
    answer = json.dumps([{"actor": "we", "action": "collect", "data": "location"},
                         {"actor": "partners", "action": "share", "data": "device id"}])
    kg = read_policy(doc, fake_client(lambda s, p: answer, parallelism=4), doc_id="d")
    n = len(segment_policy(doc))
    for i in range(len(kg)):
        for ref in kg.provenances(i):
            assert ref.doc == "d" and 0 <= ref.index < n


def test_read_policy_deterministic_under_replay(unit_client):
    doc = "We collect your location. We also gather GPS coordinates."
    assert read_policy(doc, unit_client, doc_id="dedupe") == read_policy(doc, unit_client, doc_id="dedupe")


# -- html and estimator ---------------------------------------------------------------


def test_strip_html():
    page = ("<html><head><style>p {color: red}</style><script>var x = 'We sell data.';</script></head>"
            "<body><h1>Privacy</h1><p>We collect <b>location</b>.</p></body></html>")
    assert strip_html(page) == "Privacy We collect location."


def test_policy_reader_estimator(unit_client):
    reader = PolicyReader(client=unit_client, html=True)
    graphs = reader.fit().transform([("never_email", "<p>We never share your email address. Contact us anytime.</p>")])
    assert len(graphs) == 1 and len(graphs[0]) == 1
    assert reader.get_params()["negation_check"] is True
    with pytest.raises(ValueError):
        PolicyReader().fit()


def test_stage_tag_on_exchanges(unit_client):
    read_policy("Contact us anytime.", unit_client, doc_id="x")
    assert {e.stage for e in unit_client.ledger.exchanges} == {Stage.POLICY_READ}
