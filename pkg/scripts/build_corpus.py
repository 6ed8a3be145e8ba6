"""Regenerate the fixture corpus under ``corpus/``.

Writes the FlowDroid XML files, the policies, the ground truth, and then
records replay fixtures by running the real CLI pipeline against a scripted
stand-in model (record mode). Re-run after changing a prompt template:

    python scripts/build_corpus.py
"""
from __future__ import annotations

import html
import json
import math
import re
import shutil
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CORPUS = ROOT / "corpus"
sys.path.insert(0, str(ROOT / "scripts"))

from policykg import cli  # noqa: E402
from policykg.kg_model import get_vocabulary  # noqa: E402
from policykg.leak_extractor import RuleTables, parse_signature  # noqa: E402
from policykg.llm_client import Completion, LLMClient, RecordBackend, Stage  # noqa: E402

# -- API catalog -----------------------------------------------------------------

SRC = {
    "location": "$r2 = virtualinvoke $r1.<android.location.LocationManager: android.location.Location getLastKnownLocation(java.lang.String)>(\"gps\")",
    "latitude": "$d0 = virtualinvoke $r2.<android.location.Location: double getLatitude()>()",
    "device_id": "$r3 = virtualinvoke $r2.<android.telephony.TelephonyManager: java.lang.String getDeviceId()>()",
    "imei": "$r3 = virtualinvoke $r2.<android.telephony.TelephonyManager: java.lang.String getImei()>()",
    "line1": "$r3 = virtualinvoke $r2.<android.telephony.TelephonyManager: java.lang.String getLine1Number()>()",
    "adid": "$r4 = virtualinvoke $r3.<com.google.android.gms.ads.identifier.AdvertisingIdClient$Info: java.lang.String getId()>()",
    "android_id": "$r2 = staticinvoke <android.provider.Settings$Secure: java.lang.String getString(android.content.ContentResolver,java.lang.String)>($r1, \"android_id\")",
    "mac": "$r3 = virtualinvoke $r2.<android.net.wifi.WifiInfo: java.lang.String getMacAddress()>()",
    "ssid": "$r3 = virtualinvoke $r2.<android.net.wifi.WifiInfo: java.lang.String getSSID()>()",
    "netop": "$r3 = virtualinvoke $r2.<android.telephony.TelephonyManager: java.lang.String getNetworkOperatorName()>()",
    "contacts": "$r5 = staticinvoke <android.provider.ContactsContract$Contacts: java.io.InputStream openContactPhotoInputStream(android.content.ContentResolver,android.net.Uri)>($r3, $r4)",
    "sms": "$r3 = virtualinvoke $r2.<android.telephony.SmsMessage: java.lang.String getMessageBody()>()",
    "calllog": "$r2 = staticinvoke <android.provider.CallLog$Calls: java.lang.String getLastOutgoingCall(android.content.Context)>($r1)",
    "email": "$r2 = virtualinvoke $r1.<android.accounts.AccountManager: android.accounts.Account[] getAccounts()>()",
    "apps": "$r2 = virtualinvoke $r1.<android.content.pm.PackageManager: java.util.List getInstalledPackages(int)>(0)",
    "sim": "$r3 = virtualinvoke $r2.<android.telephony.TelephonyManager: java.lang.String getSimSerialNumber()>()",
    "contact_reader": "$r2 = virtualinvoke $r1.<com.chatter.contacts.ContactReader: java.util.List readAll()>()",
    "session_token": "$r2 = virtualinvoke $r1.<com.chatter.util.Session: java.lang.String token()>()",
    "geo_helper": "$r2 = staticinvoke <com.shopnow.geo.GeoHelper: java.lang.String currentCity(android.content.Context)>($r1)",
}

SINK = {
    "log": "staticinvoke <android.util.Log: int d(java.lang.String,java.lang.String)>(\"DBG\", $r3)",
    "http": "virtualinvoke $r4.<java.net.HttpURLConnection: void setRequestProperty(java.lang.String,java.lang.String)>(\"X-Data\", $r3)",
    "url": "$r6 = virtualinvoke $r5.<java.net.URL: java.net.URLConnection openConnection()>()",
    "okhttp": "$r5 = virtualinvoke $r4.<okhttp3.Request$Builder: okhttp3.Request$Builder url(java.lang.String)>($r3)",
    "prefs": "interfaceinvoke $r4.<android.content.SharedPreferences$Editor: android.content.SharedPreferences$Editor putString(java.lang.String,java.lang.String)>(\"k\", $r3)",
    "udp": "virtualinvoke $r5.<java.net.DatagramSocket: void send(java.net.DatagramPacket)>($r6)",
    "sms_send": "virtualinvoke $r5.<android.telephony.SmsManager: void sendTextMessage(java.lang.String,java.lang.String,java.lang.String,android.app.PendingIntent,android.app.PendingIntent)>($r1, null, $r3, null, null)",
    "broadcast": "virtualinvoke $r0.<android.content.Context: void sendBroadcast(android.content.Intent)>($r4)",
    "firebase": "virtualinvoke $r5.<com.google.firebase.analytics.FirebaseAnalytics: void logEvent(java.lang.String,android.os.Bundle)>(\"login\", $r6)",
    "facebook": "staticinvoke <com.facebook.appevents.AppEventsLogger: void setUserID(java.lang.String)>($r3)",
    "unity": "staticinvoke <com.unity3d.ads.metadata.MetaData: void set(java.lang.String,java.lang.Object)>(\"uid\", $r3)",
    "applovin": "virtualinvoke $r5.<com.applovin.sdk.AppLovinSdk: void setUserIdentifier(java.lang.String)>($r3)",
    "appsflyer": "virtualinvoke $r5.<com.appsflyer.AppsFlyerLib: void setCustomerUserId(java.lang.String)>($r3)",
}

# -- scenarios -------------------------------------------------------------------
# Each flow: (sources [(api, method)], sink api, sink method, ground-truth violation?)


def m(cls: str, sig: str = "void onCreate(android.os.Bundle)") -> str:
    return f"<{cls}: {sig}>"


def J(*triples) -> str:
    return json.dumps([{"actor": a, "action": b, "data": c} for a, b, c in triples])


APPS = {
    "weatherly": {
        "policy": (
            "Weatherly Privacy Policy\n\n"
            "We collect your location to provide local forecasts. "
            "We do not share your location with third parties. "
            "We share your advertising identifier with Google AdMob to show relevant ads. "
            "We never collect your contacts. "
            "Contact us anytime at privacy@weatherly.example.\n"
        ),
        "answers": {
            "We collect your location to provide local forecasts.": J(("first_party", "collect", "location")),
            "We do not share your location with third parties.": {
                "first": J(("third_party", "share", "location")),
                "negation": J(("third_party", "not-share", "location")),
            },
            "We share your advertising identifier with Google AdMob to show relevant ads.":
                J(("third_party:Google AdMob", "share", "advertising identifier")),
            "We never collect your contacts.": J(("first_party", "not-collect", "contacts")),
        },
        "flows": {
            "w1_forecast.xml": [
                ([("location", m("com.weatherly.app.ForecastActivity"))], "log", m("com.weatherly.app.ForecastActivity"), False),
                ([("latitude", m("com.weatherly.net.ForecastClient", "void fetch(android.location.Location)"))], "url",
                 m("com.weatherly.net.ForecastClient", "void fetch(android.location.Location)"), False),
            ],
            "w2_ads.xml": [
                ([("adid", m("com.google.android.gms.ads.internal.AdRequestBuilder", "void build()"))], "http",
                 m("com.google.android.gms.ads.internal.AdRequestBuilder", "void build()"), False),
            ],
            "w3_sync.xml": [
                ([("contacts", m("com.weatherly.social.InviteFriends", "void sync()")),
                  ("email", m("com.weatherly.social.InviteFriends", "void sync()"))], "okhttp",
                 m("com.weatherly.social.InviteFriends", "void sync()"), True),
            ],
        },
    },
    "fitpal": {
        "policy": (
            "FitPal collects your location and device identifiers to record workouts. "
            "We share device identifiers with analytics providers. "
            "We will not share your phone number.\n"
        ),
        "answers": {
            "FitPal collects your location and device identifiers to record workouts.":
                J(("first_party", "collect", "location"), ("first_party", "collect", "device identifiers")),
            "We share device identifiers with analytics providers.":
                J(("third_party", "share", "device identifiers")),
            "We will not share your phone number.": {"first": J(("first_party", "not-share", "phone number"))},
        },
        "flows": {
            "f1_workout.xml": [
                ([("location", m("com.fitpal.track.WorkoutService", "void onLocationChanged(android.location.Location)"))], "prefs",
                 m("com.fitpal.track.WorkoutService", "void onLocationChanged(android.location.Location)"), False),
                ([("device_id", m("com.fitpal.track.WorkoutService", "void onStart()"))], "prefs",
                 m("com.fitpal.track.WorkoutService", "void onStart()"), False),
            ],
            "f2_analytics.xml": [
                ([("device_id", m("com.fitpal.App", "void onCreate()"))], "firebase", m("com.fitpal.App", "void onCreate()"), False),
                ([("device_id", m("com.fitpal.ads.Banner", "void load()"))], "applovin", m("com.fitpal.ads.Banner", "void load()"), True),
            ],
            "f3_profile.xml": [
                ([("line1", m("com.fitpal.profile.ProfileUploader", "void upload()"))], "http",
                 m("com.fitpal.profile.ProfileUploader", "void upload()"), True),
            ],
        },
    },
    "notely": {
        "policy": (
            "Notely respects your privacy. "
            "We do not collect any personal data. "
            "Your notes stay on your device\n"
        ),
        "answers": {
            "We do not collect any personal data.": J(("first_party", "not-collect", "personal data")),
        },
        "flows": {
            "n1_sync.xml": [
                ([("android_id", m("com.notely.Startup"))], "log", m("com.notely.Startup"), True),
                ([("mac", m("com.notely.sync.LanSync", "void announce()"))], "udp", m("com.notely.sync.LanSync", "void announce()"), True),
            ],
            "n2_empty.xml": [],
        },
    },
    "chatter": {
        "policy": (
            "We access your contacts to help you find friends on Chatter. "
            "We collect your phone number to create your account. "
            "We do not sell or share your contacts with third parties. "
            "SMS messages are never collected by Chatter. "
            "We may share your Android ID with Facebook.\n"
        ),
        "answers": {
            "We access your contacts to help you find friends on Chatter.": J(("first_party", "collect", "contacts")),
            "We collect your phone number to create your account.": J(("first_party", "collect", "phone number")),
            "We do not sell or share your contacts with third parties.": {
                "first": "Here are the practices: third parties do not receive contacts.",
                "reformat": J(("third_party", "not-share", "contacts")),
            },
            "SMS messages are never collected by Chatter.": J(("first_party", "not-collect", "SMS messages")),
            "We may share your Android ID with Facebook.": J(("third_party:facebook", "share", "Android ID")),
        },
        "flows": {
            "c1_friends.xml": [
                ([("contacts", m("com.chatter.friends.FriendFinder", "void match()"))], "http",
                 m("com.chatter.friends.FriendFinder", "void match()"), False),
            ],
            "c2_sms.xml": [
                ([("sms", m("com.chatter.sms.SmsReceiver", "void onReceive(android.content.Context,android.content.Intent)"))], "log",
                 m("com.chatter.sms.SmsReceiver", "void onReceive(android.content.Context,android.content.Intent)"), True),
            ],
            "c3_account.xml": [
                ([("line1", m("com.chatter.account.Signup", "void register()"))], "prefs", m("com.chatter.account.Signup", "void register()"), False),
                ([("android_id", m("com.chatter.account.Signup", "void register()"))], "facebook", m("com.chatter.account.Signup", "void register()"), False),
            ],
            "c4_custom.xml": [
                ([("contact_reader", m("com.chatter.contacts.Uploader", "void run()"))], "okhttp", m("com.chatter.contacts.Uploader", "void run()"), True),
                ([("session_token", m("com.chatter.util.Net", "void ping()"))], "http", m("com.chatter.util.Net", "void ping()"), False),
            ],
        },
    },
    "shopnow": {
        "policy": (
            "<html><body><h1>ShopNow Privacy</h1>"
            "<p>We collect your email address and location to process orders.</p>"
            "<p>We share your email address with our partners for marketing purposes.</p>"
            "<p>We do not collect your call history.</p>"
            "<p>We share your device identifier with Facebook.</p></body></html>\n"
        ),
        "html": True,
        "answers": {
            "ShopNow Privacy We collect your email address and location to process orders.":
                J(("first_party", "collect", "email address"), ("first_party", "collect", "location")),
            "We share your email address with our partners for marketing purposes.":
                J(("third_party", "share", "email address")),
            "We do not collect your call history.": J(("first_party", "not-collect", "call history")),
            "We share your device identifier with Facebook.": J(("third_party:facebook", "share", "device identifier")),
        },
        "flows": {
            "s1_checkout.xml": [
                ([("email", m("com.shopnow.checkout.OrderApi", "void submit()"))], "okhttp", m("com.shopnow.checkout.OrderApi", "void submit()"), False),
                ([("geo_helper", m("com.shopnow.checkout.OrderApi", "void submit()"))], "log", m("com.shopnow.checkout.OrderApi", "void submit()"), False),
            ],
            "s2_tracking.xml": [
                ([("device_id", m("com.shopnow.tracking.Tracker", "void init()"))], "facebook", m("com.shopnow.tracking.Tracker", "void init()"), False),
                ([("apps", m("com.shopnow.tracking.Tracker", "void init()"))], "appsflyer", m("com.shopnow.tracking.Tracker", "void init()"), True),
            ],
            "s3_support.xml": [
                ([("calllog", m("com.shopnow.support.CallHelper", "void report()")),
                  ("netop", m("com.shopnow.support.CallHelper", "void report()"))], "http",
                 m("com.shopnow.support.CallHelper", "void report()"), True),
                ("missing_sink", None, None, None),
            ],
        },
    },
    "gamezone": {
        "policy": (
            "This game collects your advertising ID and shares it with Unity Ads and AppLovin. "
            "We do not collect your location. "
            "We never share your IMEI.\n"
        ),
        "answers": {
            "This game collects your advertising ID and shares it with Unity Ads and AppLovin.": J(
                ("first_party", "collect", "advertising ID"),
                ("third_party:unity ads", "share", "advertising ID"),
                ("third_party:applovin", "share", "advertising ID"),
            ),
            "We do not collect your location.": J(("first_party", "not-collect", "location")),
            "We never share your IMEI.": J(("first_party", "not-share", "IMEI")),
        },
        "flows": {
            "g1_ads.xml": [
                ([("adid", m("com.gamezone.ads.AdManager", "void init()"))], "unity", m("com.gamezone.ads.AdManager", "void init()"), False),
                ([("android_id", m("com.gamezone.ads.AdManager", "void init()"))], "applovin", m("com.gamezone.ads.AdManager", "void init()"), True),
            ],
            "g2_telemetry.xml": [
                ([("location", m("com.gamezone.telemetry.Reporter", "void send()"))], "log", m("com.gamezone.telemetry.Reporter", "void send()"), True),
                ([("imei", m("com.gamezone.telemetry.Reporter", "void send()"))], "http", m("com.gamezone.telemetry.Reporter", "void send()"), True),
            ],
            "g3_net.xml": [
                ([("ssid", m("com.gamezone.net.ConnectivityCheck", "boolean online()"))], "log",
                 m("com.gamezone.net.ConnectivityCheck", "boolean online()"), False),
                ([("sim", m("com.gamezone.net.ConnectivityCheck", "boolean online()"))], "broadcast",
                 m("com.gamezone.net.ConnectivityCheck", "boolean online()"), True),
            ],
        },
    },
}

# answers of the stand-in model for flows the rule tables cannot place
LEAK_ANSWERS = {
    "com.chatter.contacts.ContactReader": {"actor": "first_party", "action": "share", "data": "contact"},
    "com.chatter.util.Session": {"actor": "first_party", "action": "share", "data": "none"},
    "com.shopnow.geo.GeoHelper": {"actor": "first_party", "action": "collect", "data": "location"},
}


# -- XML -------------------------------------------------------------------------


def write_flowdroid(path: Path, results) -> None:
    root = ET.Element("DataFlowResults", FileFormatVersion="102", TerminationState="Success")
    res_el = ET.SubElement(root, "Results")
    for item in results:
        r = ET.SubElement(res_el, "Result")
        if item[0] == "missing_sink":
            srcs = ET.SubElement(r, "Sources")
            ET.SubElement(srcs, "Source", Statement=SRC["device_id"], Method=m("com.shopnow.Orphan"))
            continue
        sources, sink, sink_method, _ = item
        s = ET.SubElement(r, "Sink", Statement=SINK[sink], Method=sink_method)
        ET.SubElement(s, "AccessPath", Value="$r3", Type="java.lang.String", TaintSubFields="true")
        srcs = ET.SubElement(r, "Sources")
        for api, method in sources:
            src = ET.SubElement(srcs, "Source", Statement=SRC[api], Method=method)
            ET.SubElement(src, "AccessPath", Value="$r2", Type="java.lang.String", TaintSubFields="true")
    perf = ET.SubElement(root, "PerformanceData")
    ET.SubElement(perf, "PerformanceEntry", Name="TotalRuntimeSeconds", Value=str(3 + len(results)))
    ET.indent(root)
    path.write_text('<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n",
                    encoding="utf-8")


# -- stand-in model ---------------------------------------------------------------


def tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4))


_ATTR = re.compile(r'<(Sink|Source) Statement="([^"]*)" Method="([^"]*)"')


class ScriptedModel:
    """Deterministic stand-in for a chat model, answering from the scenarios."""

    deterministic = True

    def __init__(self):
        self.policy = {}
        for app in APPS.values():
            self.policy.update(app["answers"])
        self.reformat = {v["first"]: v["reformat"] for v in self.policy.values()
                         if isinstance(v, dict) and "reformat" in v}
        self.rules = RuleTables.load()
        self.vocab = get_vocabulary()

    def complete(self, stage: Stage, prompt: str) -> Completion:
        text = self.answer(stage, prompt)
        out_tokens = tokens(text)
        return Completion(text, tokens(prompt), out_tokens, 350 + 12 * out_tokens + len(prompt) // 50)

    def answer(self, stage: Stage, prompt: str) -> str:
        if "could not be parsed" in prompt:
            previous = prompt.split("Previous reply:\n", 1)[1].strip()
            return self.reformat.get(previous, "[]")
        if stage is Stage.POLICY_READ:
            sentence = prompt.split("Sentence:\n", 1)[1].strip()
            entry = self.policy.get(sentence, "[]")
            if isinstance(entry, dict):
                if "contains a negation word" in prompt:
                    return entry.get("negation", entry["first"])
                return entry["first"]
            return entry
        if stage is Stage.LEAK_MAP:
            for cls, obj in LEAK_ANSWERS.items():
                if cls in prompt:
                    return json.dumps(obj)
            return json.dumps({"actor": "first_party", "action": "collect", "data": "none"})
        if stage is Stage.REPORT:
            body = prompt.rsplit("add facts.\n\n", 1)[1].strip()
            return "Audit finding: " + " ".join(l.strip() for l in body.splitlines())
        if stage is Stage.BASELINE_STAGE1:
            return self._summary(prompt)
        if stage is Stage.BASELINE_STAGE2:
            methods = re.findall(r" in (<[^>]*\)>)$", prompt, re.MULTILINE)
            return json.dumps(list(dict.fromkeys(methods)))
        if stage is Stage.BASELINE_STAGE3:
            return self._judge(prompt)
        raise AssertionError(f"unexpected stage {stage}")

    def _summary(self, prompt: str) -> str:
        lines, sink = [], None
        for kind, stmt, method in _ATTR.findall(prompt):
            stmt, method = html.unescape(stmt), html.unescape(method)
            sig = parse_signature(stmt)
            api = f"<{sig.class_name}: {sig.return_type} {sig.name}({sig.params})>" if sig else stmt
            if kind == "Sink":
                sink = (api, method)
            elif sink is not None:
                lines.append(f"FLOW: {api} -> {sink[0]} in {sink[1]}")
        return "\n".join(lines) if lines else "NO FLOWS"

    def _judge(self, prompt: str) -> str:
        flows = prompt.split("Data flows observed in this method:\n", 1)[1].split("\n\nPrivacy policy:", 1)[0]
        policy = prompt.split("Privacy policy:\n", 1)[1].rsplit("\n\nIs the behaviour", 1)[0].lower()
        # the stand-in judges loosely: a data type mentioned anywhere without a
        # negation nearby counts as declared, everything else as a violation
        verdict = "CONSISTENT"
        for line in flows.splitlines():
            sig = parse_signature(line.split("->")[0])
            data = self.rules.data_for(sig)
            words = [p for p, t in self.vocab.data_synonyms.items() if t == data] if data else []
            sentences = [s for s in re.split(r"(?<=[.!?])\s+", policy) if any(f" {w} " in f" {s} " for w in words)]
            if not sentences or all(self.vocab.has_negation_cue(s) for s in sentences):
                if "third parties" not in policy and "partners" not in policy:
                    verdict = "VIOLATION"
        reason = "The observed flows are covered by the policy." if verdict == "CONSISTENT" else \
            "The policy does not disclose this data flow."
        return f"{reason}\nVERDICT: {verdict}"


# -- build -----------------------------------------------------------------------


def write_inputs() -> list[str]:
    if CORPUS.exists():
        shutil.rmtree(CORPUS)
    truth = ["# schema: policykg-truth/1", "file\trecord\tlabel"]
    for app, spec in APPS.items():
        base = CORPUS / "apps" / app
        (base / "flows").mkdir(parents=True)
        (base / ("policy.html" if spec.get("html") else "policy.txt")).write_text(spec["policy"], encoding="utf-8")
        for name, results in spec["flows"].items():
            write_flowdroid(base / "flows" / name, results)
            for i, item in enumerate(results):
                if item[0] != "missing_sink":
                    truth.append(f"apps/{app}/flows/{name}\t{i}\t{int(item[3])}")
    (CORPUS / "truth.tsv").write_text("\n".join(truth) + "\n", encoding="utf-8")
    (CORPUS / "replay").mkdir()
    (CORPUS / "policykg.ini").write_text(
        "[policykg]\nbackend = replay\nfixtures = replay/fixtures.jsonl\nparallelism = 4\n", encoding="utf-8"
    )
    return list(APPS)


def record() -> None:
    import run_corpus

    fixture = CORPUS / "replay" / "fixtures.jsonl"
    fixture.write_text("", encoding="utf-8")
    model = ScriptedModel()

    def recording_client(cfg, required=None):
        return LLMClient(RecordBackend(model, fixture), parallelism=cfg.parallelism)

    original = cli._client
    cli._client = recording_client
    try:
        out = ROOT / "build" / "record_run"
        if out.exists():
            shutil.rmtree(out)
        run_corpus.run(CORPUS, out)
    finally:
        cli._client = original
    rows = [json.loads(l) for l in fixture.read_text(encoding="utf-8").splitlines() if l.strip()]
    rows.sort(key=lambda r: (r["stage"], r["digest"]))
    fixture.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    print(f"recorded {len(rows)} exchanges into {fixture.relative_to(ROOT)}")


if __name__ == "__main__":
    write_inputs()
    record()
