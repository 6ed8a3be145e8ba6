"""Lenient extraction of JSON payloads from model replies."""
from __future__ import annotations

import json
import re

_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


class MalformedReply(ValueError):
    pass


def parse_json_reply(text: str, expect: type = list):
    """Return the first JSON value of type ``expect`` found in ``text``.

    Models like to wrap JSON in code fences or add a sentence around it, so
    fenced blocks are tried first, then the outermost bracket pair.
    """
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    open_ch, close_ch = ("[", "]") if expect is list else ("{", "}")
    for chunk in candidates:
        chunk = chunk.strip()
        start, end = chunk.find(open_ch), chunk.rfind(close_ch)
        if start == -1 or end < start:
            continue
        try:
            value = json.loads(chunk[start:end + 1])
        except json.JSONDecodeError:
            continue
        if isinstance(value, expect):
            return value
    raise MalformedReply(f"no JSON {expect.__name__} in reply: {text[:80]!r}")
