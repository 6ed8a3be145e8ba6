"""``policykg`` command line.

Exit codes: 0 success / no violations, 1 violations found (or every input
failed), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import prompts
from .baseline import run_baseline
from .consistency_checker import (
    check_all,
    load_verdicts,
    render_reports,
    save_verdicts,
    write_reports,
)
from .eval_harness import (
    ProvenanceMismatchError,
    compare_costs,
    format_table,
    load_truth,
    metrics,
    metrics_rows,
    score,
    write_csv,
)
from .kg_model import KGKind, Vocabulary, load_kg, save_kg, set_vocabulary
from .leak_extractor import LLM_MODES, RuleTables, display_path, extract_leak_kg
from .llm_client import LLMClient, LLMConfig, LLMError, ReplayMissError, UsageLedger
from .policy_reader import read_policy, strip_html

logger = logging.getLogger("policykg")

EXIT_OK, EXIT_FOUND, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    backend: str | None = None
    fixtures: list[str] = field(default_factory=list)
    record_to: str | None = None
    base_url: str = LLMConfig.base_url
    model: str = LLMConfig.model
    temperature: float = 0.0
    max_retries: int = 3
    parallelism: int = 4
    taxonomy: str | None = None
    synonyms: str | None = None
    sdk_prefixes: str | None = None
    sources: str | None = None
    sinks: str | None = None
    prompt_version: str = prompts.DEFAULT_VERSION
    output_dir: str = "."

    def validate(self) -> None:
        """Check referenced files before any model call is made."""
        for name in ("taxonomy", "synonyms", "sdk_prefixes", "sources", "sinks"):
            value = getattr(self, name)
            if value and not Path(value).is_file():
                raise UsageError(f"{name} file not found: {value}")
        if self.backend not in (None, "live", "replay", "record"):
            raise UsageError(f"unknown backend {self.backend!r}")
        if self.backend == "replay":
            if not self.fixtures:
                raise UsageError("--backend replay needs --fixtures")
            for f in self.fixtures:
                if not Path(f).is_file():
                    raise UsageError(f"replay fixture not found: {f}")
        if self.backend == "record" and not (self.record_to or self.fixtures):
            raise UsageError("--backend record needs --record-to or --fixtures")
        if self.parallelism < 1:
            raise UsageError("parallelism must be at least 1")
        try:
            prompts.use_version(self.prompt_version)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def llm_config(self) -> LLMConfig:
        return LLMConfig(self.backend, self.base_url, self.model, self.temperature, self.max_retries,
                         self.parallelism, list(self.fixtures), self.record_to)


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config_file(path: str | Path) -> dict:
    """Read ``[policykg]`` key = value pairs from an INI-style file."""
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise UsageError(f"config file not found: {path}")
    if not parser.has_section("policykg"):
        raise UsageError(f"{path}: missing [policykg] section")
    out: dict = {}
    base = Path(path).parent
    for key, raw in parser.items("policykg"):
        key = key.replace("-", "_")
        if key not in _CONFIG_TYPES:
            raise UsageError(f"{path}: unknown config key {key!r}")
        if key == "fixtures":
            out[key] = [str(base / p.strip()) for p in raw.replace(",", "\n").splitlines() if p.strip()]
        elif key in ("parallelism", "max_retries"):
            out[key] = int(raw)
        elif key == "temperature":
            out[key] = float(raw)
        elif key in ("taxonomy", "synonyms", "sdk_prefixes", "sources", "sinks", "record_to", "output_dir"):
            out[key] = str(base / raw.strip())
        else:
            out[key] = raw.strip()
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in _CONFIG_TYPES:
        flag = getattr(args, name, None)
        if flag not in (None, []):
            values[name] = flag
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _setup(cfg: RunConfig) -> None:
    if cfg.taxonomy or cfg.synonyms or cfg.sdk_prefixes:
        set_vocabulary(Vocabulary.load(cfg.taxonomy, cfg.synonyms, cfg.sdk_prefixes))
    else:
        set_vocabulary(None)


def _client(cfg: RunConfig, required: str | None = None) -> LLMClient | None:
    if cfg.backend is None:
        if required:
            raise UsageError(f"{required} needs a model backend (--backend live|replay|record)")
        return None
    try:
        return LLMClient.from_config(cfg.llm_config())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out(cfg: RunConfig, given: str | None, default: str) -> Path:
    path = Path(given) if given else Path(cfg.output_dir) / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def ledger_path(out: Path) -> Path:
    stem = out.name.split(".")[0]
    return out.with_name(f"{stem}.ledger.json")


def _save_ledger(client: LLMClient | None, out: Path) -> None:
    if client is not None:
        client.ledger.save(ledger_path(out))


def _read_input(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p.read_text(encoding="utf-8")


# -- commands ------------------------------------------------------------------


def cmd_read_policy(args, cfg: RunConfig) -> int:
    text = _read_input(args.policy)
    if args.html:
        text = strip_html(text)
    client = _client(cfg, "read-policy")
    out = _out(cfg, args.out, "policy_kg.json")
    warnings: list[str] = []
    with client.timed():
        kg = read_policy(text, client, doc_id=args.doc_id or display_path(args.policy),
                         negation_check=not args.no_negation_check, llm_data_mapping=args.llm_data_mapping,
                         warnings=warnings)
    save_kg(kg, out)
    _save_ledger(client, out)
    print(f"{args.policy}: {len(kg)} policy triple(s), {len(warnings)} warning(s) -> {out}")
    return EXIT_OK


def cmd_extract_leaks(args, cfg: RunConfig) -> int:
    client = _client(cfg) if args.llm_mode != "off" else None
    rules = RuleTables.load(cfg.sources, cfg.sinks)
    out = _out(cfg, args.out, "leak_kg.json")
    warnings: list[str] = []
    reports: list = []
    if client is not None:
        with client.timed():
            kg = extract_leak_kg(args.xml, rules, client, args.llm_mode, warnings, reports)
    else:
        kg = extract_leak_kg(args.xml, rules, None, "off", warnings, reports)
    for r in reports:
        if r.ok:
            print(f"{r.path}: {r.records} flow(s), {r.classified} classified, {len(r.record_errors)} record error(s)")
        else:
            print(f"{r.path}: FAILED", file=sys.stdout)
    for msg in warnings:
        print(f"warning: {msg}", file=sys.stderr)
    if not any(r.ok for r in reports):
        print("error: no input file could be parsed", file=sys.stderr)
        return EXIT_FOUND
    save_kg(kg, out)
    _save_ledger(client, out)
    print(f"LeakKG: {len(kg)} triple(s) -> {out}")
    return EXIT_OK


def _load_kind(path: str, kind: KGKind):
    if not Path(path).is_file():
        raise UsageError(f"file not found: {path}")
    try:
        kg = load_kg(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: not a knowledge-graph file ({exc})") from exc
    if kg.kind is not kind:
        raise UsageError(f"{path}: expected a {kind.value}, found a {kg.kind.value}")
    return kg


def cmd_check(args, cfg: RunConfig) -> int:
    policy = _load_kind(args.policy_kg, KGKind.POLICY)
    leak = _load_kind(args.leak_kg, KGKind.LEAK)
    client = _client(cfg, "--llm-report") if args.llm_report else None
    out = _out(cfg, args.out, "verdicts.json")
    warnings: list[str] = []
    verdicts = check_all(leak, policy, warnings)
    if args.report or args.llm_report:
        report_dir = Path(args.report or Path(cfg.output_dir) / "reports")
        if client is not None:
            with client.timed():
                reports = render_reports(verdicts, client, warnings)
        else:
            reports = render_reports(verdicts)
        write_reports(reports, report_dir, args.single_file)
    save_verdicts(verdicts, out, "hybrid", warnings)
    _save_ledger(client, out)
    for msg in warnings:
        print(f"warning: {msg}", file=sys.stderr)
    n_bad = sum(v.violation for v in verdicts)
    print(f"{len(verdicts)} leak(s) checked, {n_bad} violation(s) -> {out}")
    return EXIT_FOUND if n_bad else EXIT_OK


def cmd_baseline(args, cfg: RunConfig) -> int:
    policy = _read_input(args.policy)
    for p in args.xml:
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    client = _client(cfg, "baseline")
    out = _out(cfg, args.out, "baseline_verdicts.json")
    warnings: list[str] = []
    with client.timed():
        records = run_baseline(policy, args.xml, client, args.chunk_chars, warnings)
    save_verdicts(records, out, "baseline", warnings)
    _save_ledger(client, out)
    for msg in warnings:
        print(f"warning: {msg}", file=sys.stderr)
    n_bad = sum(r.violation for r in records)
    print(f"{len(records)} flow(s) judged, {n_bad} violation(s) -> {out}")
    return EXIT_FOUND if n_bad else EXIT_OK


def _named(items: list[str], what: str) -> dict[str, list[str]]:
    named: dict[str, list[str]] = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"{what} must look like NAME=PATH, got {item!r}")
        if not Path(path).is_file():
            raise UsageError(f"file not found: {path}")
        named.setdefault(name, []).append(path)
    return named


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if not Path(args.truth).is_file():
        raise UsageError(f"file not found: {args.truth}")
    truth = load_truth(args.truth)
    results = {}
    try:
        for name, paths in _named(args.verdicts, "--verdicts").items():
            records = [r for p in paths for r in load_verdicts(p)[1]]
            results[name] = metrics(score(records, truth))
    except ProvenanceMismatchError as exc:
        print("error: " + str(exc), file=sys.stderr)
        for ref in exc.missing:
            print(f"missing truth: {ref}", file=sys.stderr)
        return EXIT_USAGE
    table = metrics_rows(results)
    print(format_table(table))
    if args.csv:
        write_csv(table, args.csv)
    if args.ledger:
        ledgers = []
        for name, paths in _named(args.ledger, "--ledger").items():
            merged = None
            for p in paths:
                loaded = UsageLedger.load(p)
                merged = loaded if merged is None else merged.merge(loaded)
            ledgers.append((name, merged))
        if len(ledgers) < 2:
            raise UsageError("cost comparison needs at least two named ledgers")
        costs = compare_costs(ledgers).table()
        print()
        print(format_table(costs))
        if args.cost_csv:
            write_csv(costs, args.cost_csv)
    if not all(m.defined for m in results.values()):
        print("error: at least one metric is undefined", file=sys.stderr)
        return EXIT_FOUND
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="INI file with a [policykg] section; flags override it")
    g.add_argument("--backend", choices=("live", "replay", "record"))
    g.add_argument("--fixtures", action="append", default=[], help="replay fixture file (repeatable)")
    g.add_argument("--record-to", dest="record_to")
    g.add_argument("--base-url", dest="base_url")
    g.add_argument("--model")
    g.add_argument("--parallelism", type=int)
    g.add_argument("--max-retries", dest="max_retries", type=int)
    g.add_argument("--taxonomy")
    g.add_argument("--synonyms")
    g.add_argument("--sdk-prefixes", dest="sdk_prefixes")
    g.add_argument("--sources")
    g.add_argument("--sinks")
    g.add_argument("--prompt-version", dest="prompt_version")
    g.add_argument("--output-dir", dest="output_dir")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policykg", description="Privacy policy / code consistency checker")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("read-policy", help="policy text -> PolicyKG")
    p.add_argument("policy")
    p.add_argument("-o", "--out")
    p.add_argument("--html", action="store_true", help="strip HTML tags before reading")
    p.add_argument("--doc-id", dest="doc_id")
    p.add_argument("--no-negation-check", action="store_true")
    p.add_argument("--llm-data-mapping", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_read_policy)

    p = sub.add_parser("extract-leaks", help="FlowDroid XML -> LeakKG")
    p.add_argument("xml", nargs="+")
    p.add_argument("-o", "--out")
    p.add_argument("--llm-mode", choices=LLM_MODES, default="fallback")
    _common(p)
    p.set_defaults(func=cmd_extract_leaks)

    p = sub.add_parser("check", help="PolicyKG + LeakKG -> verdicts")
    p.add_argument("--policy-kg", required=True)
    p.add_argument("--leak-kg", required=True)
    p.add_argument("-o", "--out")
    p.add_argument("--report", metavar="DIR", help="write template reports for violations")
    p.add_argument("--llm-report", action="store_true", help="also rewrite reports with the model")
    p.add_argument("--single-file", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("baseline", help="pure-LLM pipeline -> verdicts")
    p.add_argument("policy")
    p.add_argument("xml", nargs="+")
    p.add_argument("-o", "--out")
    p.add_argument("--chunk-chars", type=int, default=6000)
    _common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="score verdict files and compare ledgers")
    p.add_argument("--verdicts", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--truth", required=True)
    p.add_argument("--ledger", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--csv")
    p.add_argument("--cost-csv", dest="cost_csv")
    _common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        _setup(cfg)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReplayMissError as exc:
        print(f"error: incomplete replay fixtures: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FOUND
    finally:
        set_vocabulary(None)
        prompts.use_version(prompts.DEFAULT_VERSION)


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
