"""Run both pipelines over the fixture corpus and evaluate them.

    python scripts/run_corpus.py [CORPUS_DIR] [OUT_DIR]

Uses the corpus' ``policykg.ini`` (replay backend by default). Writes KGs,
verdicts, ledgers, reports and the metric/cost tables into OUT_DIR.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path

from policykg.cli import main

ROOT = Path(__file__).resolve().parents[1]


def _call(argv: list[str], allowed=(0,)) -> int:
    code = main(argv)
    if code not in allowed:
        raise RuntimeError(f"policykg {' '.join(argv)} exited with {code}")
    return code


def run(corpus: Path, out: Path, config: str = "policykg.ini") -> int:
    corpus, out = Path(corpus).resolve(), Path(out).resolve()
    out.mkdir(parents=True, exist_ok=True)
    cfg = ["--config", config]
    cwd = os.getcwd()
    os.chdir(corpus)
    try:
        hybrid_verdicts, baseline_verdicts = [], []
        ledgers = []
        for app in sorted(p.name for p in (corpus / "apps").iterdir() if p.is_dir()):
            base = Path("apps") / app
            policy = base / "policy.txt"
            html = []
            if not policy.exists():
                policy, html = base / "policy.html", ["--html"]
            xmls = sorted(str(p) for p in (base / "flows").glob("*.xml"))
            dest = out / app
            _call(["read-policy", str(policy), "-o", str(dest / "policy_kg.json"), *html, *cfg])
            _call(["extract-leaks", *xmls, "-o", str(dest / "leak_kg.json"), *cfg])
            _call(["check", "--policy-kg", str(dest / "policy_kg.json"), "--leak-kg", str(dest / "leak_kg.json"),
                   "-o", str(dest / "verdicts.json"), "--report", str(dest / "reports"), "--llm-report", *cfg],
                  allowed=(0, 1))
            if html:
                # the baseline reads the same text the hybrid saw
                from policykg.policy_reader import strip_html

                plain = dest / "policy.txt"
                plain.write_text(strip_html(policy.read_text(encoding="utf-8")) + "\n", encoding="utf-8")
                policy = plain
            _call(["baseline", str(policy), *xmls, "-o", str(dest / "baseline_verdicts.json"), *cfg],
                  allowed=(0, 1))
            hybrid_verdicts += ["--verdicts", f"hybrid={dest / 'verdicts.json'}"]
            baseline_verdicts += ["--verdicts", f"baseline={dest / 'baseline_verdicts.json'}"]
            ledgers += [
                "--ledger", f"baseline={dest / 'baseline_verdicts.ledger.json'}",
                "--ledger", f"hybrid={dest / 'policy_kg.ledger.json'}",
                "--ledger", f"hybrid={dest / 'leak_kg.ledger.json'}",
                "--ledger", f"hybrid+reports={dest / 'policy_kg.ledger.json'}",
                "--ledger", f"hybrid+reports={dest / 'leak_kg.ledger.json'}",
                "--ledger", f"hybrid+reports={dest / 'verdicts.ledger.json'}",
            ]
        return _call(["evaluate", *baseline_verdicts, *hybrid_verdicts, "--truth", "truth.tsv", *ledgers,
                      "--csv", str(out / "metrics.csv"), "--cost-csv", str(out / "costs.csv"), *cfg],
                     allowed=(0, 1))
    finally:
        os.chdir(cwd)


if __name__ == "__main__":
    corpus = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "corpus"
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else ROOT / "build" / "corpus_run"
    sys.exit(run(corpus, out))
