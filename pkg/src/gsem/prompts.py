"""Prompt templates shipped as text assets, and reply parsing helpers."""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from typing import Any

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")

EXPERIENCE_HEADER = "Relevant experience:"


class ReplyParseError(ValueError):
    pass


@lru_cache(maxsize=None)
def template(name: str) -> str:
    return resources.files("gsem").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def placeholders(name: str) -> set[str]:
    return set(_PLACEHOLDER.findall(template(name)))


def render(name: str, **values: str) -> str:
    """Substitute ``{name}`` placeholders verbatim.

    Only the placeholders present in the template are touched, so literal
    JSON braces in the templates survive. Missing or extra values raise.
    """
    text = template(name)
    wanted = placeholders(name)
    missing = wanted - set(values)
    extra = set(values) - wanted
    if missing or extra:
        raise KeyError(f"template {name!r}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), text).rstrip("\n")


def experience_block(items: list[tuple[str, str]]) -> str:
    """Injection block placed before a case prompt; empty when no experiences."""
    if not items:
        return ""
    parts = [EXPERIENCE_HEADER]
    for i, (condition, content) in enumerate(items, start=1):
        parts.append(f"[{i}] Condition: {condition}\n    Content: {content}")
    return "\n".join(parts) + "\n\n"


_FENCE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)


def parse_json_reply(text: str, expect: type | None = None) -> Any:
    """Parse a model reply that should be JSON.

    Strips markdown code fences and surrounding prose: the first fenced block
    wins, otherwise the outermost ``[...]``/``{...}`` span is used.
    """
    candidates = [m.group(1).strip() for m in _FENCE.finditer(text)]
    stripped = text.strip()
    candidates.append(stripped)
    for open_, close in (("[", "]"), ("{", "}")):
        i, j = stripped.find(open_), stripped.rfind(close)
        if 0 <= i < j:
            candidates.append(stripped[i : j + 1])
    for cand in candidates:
        try:
            value = json.loads(cand)
        except ValueError:
            continue
        if expect is None or isinstance(value, expect):
            return value
    kind = f" {expect.__name__}" if expect else ""
    raise ReplyParseError(f"reply is not valid JSON{kind}: {text[:200]!r}")


_STEP = re.compile(r"^\s*(?:step\s*)?(\d+)\s*[:.)-]\s*(.+)$", re.IGNORECASE)
_FINAL = re.compile(r"^\s*final\s+answer\s*[:\-]\s*(.*)$", re.IGNORECASE)


def parse_reasoning(text: str) -> tuple[list[str], str]:
    """Split a reasoning reply into step texts and the final answer.

    Unnumbered lines before the final answer are kept as steps. A reply with
    no "Final answer:" line uses its last non-empty line as the answer.
    """
    steps: list[str] = []
    final = None
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _FINAL.match(line)
        if m:
            final = m.group(1).strip()
            continue
        s = _STEP.match(line)
        steps.append(s.group(2).strip() if s else line.strip())
    if final is None:
        final = steps.pop() if steps else ""
    if not steps:
        steps = [final] if final else []
    return steps, final
