"""Loader for the prompt templates shipped as package text resources.

Templates use string.Template placeholders ($name) so that literal JSON
braces inside the prompt text need no escaping.
"""

from __future__ import annotations

import string
from functools import lru_cache
from importlib import resources

__all__ = ["load_template", "render_template", "id_list_text", "tool_docs_text"]


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = resources.files("steppref").joinpath("templates", f"{name}.txt")
    return path.read_text(encoding="utf-8")


def render_template(name: str, **subs: object) -> str:
    """Render template ``name`` with the given substitutions.

    Raises KeyError when a placeholder is left unfilled, so template and
    call site cannot drift apart silently.
    """
    return string.Template(load_template(name)).substitute(**subs)


def id_list_text(n: int) -> str:
    """Render candidate ids as prose: 1 -> "1", 2 -> "1 and 2",
    5 -> "1, 2, 3, 4, and 5"."""
    ids = [str(i) for i in range(1, n + 1)]
    if n == 1:
        return ids[0]
    if n == 2:
        return f"{ids[0]} and {ids[1]}"
    return ", ".join(ids[:-1]) + f", and {ids[-1]}"


def tool_docs_text(registry) -> str:
    """One line per registry tool: signature plus doc."""
    lines = []
    for name in sorted(registry.tools):
        spec = registry.tools[name]
        doc = f" -- {spec.doc}" if spec.doc else ""
        lines.append(f"- {spec.signature}{doc}")
    return "\n".join(lines) if lines else "- (no tools registered)"
