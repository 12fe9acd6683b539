"""Diagnostics over a preference dataset.

Three views of how chosen and rejected steps differ: which tools their
code calls, how often their executions failed, and how similar their
texts are (order-n BLEU of the rejected action against the chosen one).
All counting is deterministic so reports can be compared byte for byte.
"""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .records import FAILURE_STATUSES, InvariantViolation, PreferencePair

__all__ = [
    "DiagnosticsReport",
    "EmptyDataset",
    "EmptyHistogram",
    "bleu_n",
    "distribution_diff",
    "error_rates",
    "extract_tools",
    "report",
    "tokenize",
    "tool_histogram",
    "write_tool_csv",
]

BLEU_ORDERS = (1, 2, 3, 4)


class EmptyHistogram(ValueError):
    """Distribution distance over a histogram with zero total count."""


class EmptyDataset(ValueError):
    """Diagnostics requested over zero pairs."""


def _strip_strings_and_comments(code: str) -> str:
    """Blank out string literals and # comments with a character scanner.

    Works on code that does not parse; candidates with syntax errors still
    get counted. String bodies become a single space so the surrounding
    tokens cannot merge.
    """
    out: list[str] = []
    i = 0
    n = len(code)
    while i < n:
        ch = code[i]
        if ch == "#":
            while i < n and code[i] != "\n":
                i += 1
            continue
        if ch in "'\"":
            triple = code[i : i + 3] == ch * 3
            delim = ch * 3 if triple else ch
            i += len(delim)
            out.append(" ")
            while i < n:
                if code[i] == "\\":
                    i += 2
                    continue
                if code.startswith(delim, i):
                    i += len(delim)
                    break
                i += 1
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def extract_tools(code: str, tool_names: Iterable[str]) -> list[str]:
    """Tool invocations in source order, with multiplicity.

    Counts bare calls `name(`; attribute access `obj.name(` and mentions
    inside strings or comments do not count.
    """
    stripped = _strip_strings_and_comments(code)
    hits: list[tuple[int, str]] = []
    for name in tool_names:
        pattern = re.compile(rf"(?<![\w.]){re.escape(name)}\s*\(")
        for match in pattern.finditer(stripped):
            hits.append((match.start(), name))
    hits.sort()
    return [name for _, name in hits]


def tool_histogram(codes: Iterable[str], tool_names: Iterable[str]) -> dict[str, int]:
    names = tuple(tool_names)
    counts: Counter[str] = Counter()
    for code in codes:
        counts.update(extract_tools(code, names))
    return dict(counts)


def distribution_diff(a: Mapping[str, int], b: Mapping[str, int]) -> float:
    """Total variation distance between two normalized histograms, in percent."""
    total_a = sum(a.values())
    total_b = sum(b.values())
    if total_a <= 0 or total_b <= 0:
        raise EmptyHistogram("both histograms need a positive total count")
    keys = set(a) | set(b)
    tv = 0.5 * sum(abs(a.get(k, 0) / total_a - b.get(k, 0) / total_b) for k in keys)
    return 100.0 * tv


def _pair_status(pair: PreferencePair, key: str) -> str:
    value = pair.meta.get(key)
    if not isinstance(value, str):
        raise InvariantViolation(f"pair meta missing {key}")
    return value


def error_rates(pairs: Sequence[PreferencePair]) -> dict[str, float]:
    """Fraction of pairs whose chosen (resp. rejected) execution failed."""
    if len(pairs) == 0:
        raise EmptyDataset("error_rates needs at least one pair")
    chosen_bad = sum(
        1 for p in pairs if _pair_status(p, "chosen_status") in FAILURE_STATUSES
    )
    rejected_bad = sum(
        1 for p in pairs if _pair_status(p, "rejected_status") in FAILURE_STATUSES
    )
    return {"chosen": chosen_bad / len(pairs), "rejected": rejected_bad / len(pairs)}


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def bleu_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    """Order-n BLEU: clipped n-gram precision times a brevity penalty.

    No smoothing; a candidate shorter than n tokens scores 0. Token lists
    come from tokenize().
    """
    if n < 1:
        raise InvariantViolation(f"n must be >= 1, got {n}")
    if len(candidate) < n or len(reference) == 0:
        return 0.0
    cand_grams = Counter(
        tuple(candidate[i : i + n]) for i in range(len(candidate) - n + 1)
    )
    ref_grams = Counter(
        tuple(reference[i : i + n]) for i in range(len(reference) - n + 1)
    )
    clipped = sum(min(count, ref_grams[g]) for g, count in cand_grams.items())
    precision = clipped / sum(cand_grams.values())
    if len(candidate) >= len(reference):
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - len(reference) / len(candidate))
    return precision * brevity


@dataclass(frozen=True)
class DiagnosticsReport:
    pair_count: int
    tool_counts_chosen: dict[str, int]
    tool_counts_rejected: dict[str, int]
    tool_distribution_diff: float
    error_rate_chosen: float
    error_rate_rejected: float
    bleu: dict[str, float]


def report(pairs: Sequence[PreferencePair], tool_names: Iterable[str]) -> DiagnosticsReport:
    """One DiagnosticsReport over a pair list.

    BLEU treats the rejected action text as the candidate and the chosen
    one as the reference, averaged over pairs per order. When one side
    never calls a tool the distribution distance degenerates: 0 when both
    sides are silent, 100 when only one is.
    """
    if len(pairs) == 0:
        raise EmptyDataset("report needs at least one pair")
    names = tuple(tool_names)
    chosen_hist = tool_histogram((p.preferred.code for p in pairs), names)
    rejected_hist = tool_histogram((p.dispreferred.code for p in pairs), names)
    total_c = sum(chosen_hist.values())
    total_r = sum(rejected_hist.values())
    if total_c > 0 and total_r > 0:
        diff = distribution_diff(chosen_hist, rejected_hist)
    elif total_c == 0 and total_r == 0:
        diff = 0.0
    else:
        diff = 100.0
    rates = error_rates(pairs)
    bleu: dict[str, float] = {}
    for order in BLEU_ORDERS:
        scores = [
            bleu_n(tokenize(p.dispreferred.raw), tokenize(p.preferred.raw), order)
            for p in pairs
        ]
        bleu[str(order)] = sum(scores) / len(scores)
    return DiagnosticsReport(
        pair_count=len(pairs),
        tool_counts_chosen=chosen_hist,
        tool_counts_rejected=rejected_hist,
        tool_distribution_diff=diff,
        error_rate_chosen=rates["chosen"],
        error_rate_rejected=rates["rejected"],
        bleu=bleu,
    )


def write_tool_csv(rep: DiagnosticsReport, path: str) -> None:
    tools = sorted(set(rep.tool_counts_chosen) | set(rep.tool_counts_rejected))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tool", "chosen", "rejected"])
        for tool in tools:
            writer.writerow(
                [tool, rep.tool_counts_chosen.get(tool, 0), rep.tool_counts_rejected.get(tool, 0)]
            )
