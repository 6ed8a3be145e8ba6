"""Reference implementations written independently of the package.

They work on plain strings and dicts (the serialized triple form) so a bug
in the value types cannot hide behind itself.
"""
from __future__ import annotations


def _flip(action: str) -> str:
    return action[4:] if action.startswith("not-") else "not-" + action


def _actor_matches(policy_actor: str, leak_actor: str) -> bool:
    if policy_actor == "third_party":
        return leak_actor.split(":")[0] == "third_party"
    return policy_actor == leak_actor


def first_match(leak: dict, policy: list[dict]) -> tuple[str, int | None]:
    """Brute-force verdict for one leak: (outcome, index of deciding policy triple)."""
    for i, p in enumerate(policy):
        if _actor_matches(p["actor"], leak["actor"]) and p["data"] == leak["data"]:
            if p["action"] == leak["action"]:
                return "Consistent", i
            if p["action"] == _flip(leak["action"]):
                return "Contradicted", i
    return "Undeclared", None


def count_confusion(predicted: dict, truth: dict) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) by walking the truth table one key at a time."""
    tp = fp = fn = tn = 0
    for key in truth:
        p, t = predicted[key], truth[key]
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Percentages in floating point, for cross-checking the exact path."""
    p = 100.0 * tp / (tp + fp)
    r = 100.0 * tp / (tp + fn)
    return p, r, 2 * p * r / (p + r)
