"""Pull JSON values out of model replies that wrap them in prose."""

from __future__ import annotations

import json
from typing import Any, Optional

__all__ = ["extract_json_object", "extract_json_array"]


def _extract_balanced(text: str, open_ch: str, close_ch: str) -> Optional[Any]:
    start = text.find(open_ch)
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for pos in range(start, len(text)):
            ch = text[pos]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == open_ch:
                depth += 1
            elif ch == close_ch:
                depth -= 1
                if depth == 0:
                    try:
                        return json.loads(text[start : pos + 1])
                    except json.JSONDecodeError:
                        break
        start = text.find(open_ch, start + 1)
    return None


def extract_json_object(text: str) -> Optional[dict]:
    """First balanced JSON object in ``text``, or None."""
    value = _extract_balanced(text, "{", "}")
    return value if isinstance(value, dict) else None


def extract_json_array(text: str) -> Optional[list]:
    """First balanced JSON array in ``text``, or None."""
    value = _extract_balanced(text, "[", "]")
    return value if isinstance(value, list) else None
