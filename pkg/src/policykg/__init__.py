"""Hybrid privacy-policy / code consistency checking with knowledge graphs."""
from .baseline import BaselineChecker, run_baseline
from .consistency_checker import ConsistencyChecker, Outcome, Verdict, check_all, check_leak, render_report
from .eval_harness import ConfusionCounts, compare_costs, metrics, score
from .kg_model import (
    Action,
    Actor,
    DataType,
    FlowRef,
    KGKind,
    KnowledgeGraph,
    SegmentRef,
    Triple,
    Unmapped,
    kg_insert,
    negate_action,
    normalize_data_type,
)
from .leak_extractor import LeakExtractor, classify_flow, extract_leak_kg, parse_flowdroid_xml
from .llm_client import LLMClient, LLMConfig, ReplayBackend, Stage, UsageLedger, ledger_totals
from .policy_reader import PolicyReader, read_policy, segment_policy

__version__ = "0.1.0"

__all__ = [
    "Action", "Actor", "BaselineChecker", "ConfusionCounts", "ConsistencyChecker", "DataType", "FlowRef",
    "KGKind", "KnowledgeGraph", "LLMClient", "LLMConfig", "LeakExtractor", "Outcome", "PolicyReader",
    "ReplayBackend", "SegmentRef", "Stage", "Triple", "Unmapped", "UsageLedger", "Verdict", "check_all",
    "check_leak", "classify_flow", "compare_costs", "extract_leak_kg", "kg_insert", "ledger_totals", "metrics",
    "negate_action", "normalize_data_type", "parse_flowdroid_xml", "read_policy", "render_report",
    "run_baseline", "score", "segment_policy",
]
