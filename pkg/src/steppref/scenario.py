"""A fully scripted offline scenario for demos, smoke runs, and tests.

Every model role is answered by a pure function of the request, so two
runs with the same configuration produce byte-identical datasets. The
scripted controller proposes a mix of good and bad steps (wrong tool,
endless loop, unparseable reply) and the scripted verifier prefers the
first candidate whose execution succeeded, which gives the datasets the
texture the diagnostics expect: chosen steps mostly clean, rejected
steps failing much more often.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Union

from .executor import StubExecutor
from .gateway import ChatRequest, MockChatBackend
from .records import ToolRegistrySpec, ToolSpec
from .taskforge import Seed

__all__ = [
    "build_backend",
    "build_executor",
    "scenario_handler",
    "scenario_registry",
    "scenario_seed_pool",
]


def scenario_registry() -> ToolRegistrySpec:
    return ToolRegistrySpec(
        tools={
            "ask_search_agent": ToolSpec(
                signature="ask_search_agent(query: str) -> str",
                doc="search the web and give a short textual answer",
                fixture={"*": "The catalog says it was released in 1994."},
            ),
            "calculator": ToolSpec(
                signature="calculator(expression: str) -> str",
                doc="evaluate an arithmetic expression",
                fixture={"*": "1994"},
            ),
            "final_answer": ToolSpec(
                signature="final_answer(answer: str) -> str",
                doc="submit the final answer and stop",
            ),
        }
    )


def scenario_seed_pool() -> list[Seed]:
    return [
        Seed(
            query=f"How tall is landmark-{i}? Search for it and report the height.",
            tools=("ask_search_agent",),
        )
        for i in range(1, 31)
    ]


def _reply(thought: str, code: str) -> str:
    return f"Thought: {thought}\nCode:\n```\n{code}\n```"


def _taskgen_reply(user: str) -> str:
    match = re.search(r"Generate (\d+) new queries", user)
    count = int(match.group(1)) if match else 1
    digest = hashlib.sha256(user.encode("utf-8")).hexdigest()[:8]
    items = [
        {
            "query": (
                f"What year was gadget-{digest}-{i} released? "
                "Search for it and answer with just the year."
            ),
            "tools": ["ask_search_agent"],
        }
        for i in range(1, count + 1)
    ]
    return json.dumps(items)


_PLAN_REPLY = json.dumps(
    {
        "information": "the release year of the gadget",
        "information_from_internet": "the release year, searchable by name",
        "information_from_images": "no information is required from the images.",
        "file": {"image_numbers": 0, "image_content": {}, "other_files": []},
    }
)

_CHECK_REPLY = json.dumps(
    {
        "information_for_query": "the release year",
        "useful_information_in_files": "no files are attached",
        "missed_information_in_files": "none",
        "missed_information_web_search": "yes, the year is searchable",
        "missed_information_obtained": "yes",
        "thought": "web search alone answers this",
        "correct": "yes",
        "updated_query": "no revision is needed.",
    }
)

_FILE_CODE_REPLY = (
    "## content start\nplaceholder content\n## content end\n\n"
    "## code start\nopen('files/file_1.txt', 'w').write('placeholder')\n## code end"
)


def _tag_from(user: str) -> str:
    match = re.search(r"gadget-([0-9a-f]{8}-\d+)", user)
    return match.group(1) if match else "unknown-0"


def _controller_reply(request: ChatRequest) -> list[str]:
    user = request.messages[-1][1]
    n = request.sampling.n_samples
    tag = _tag_from(user)
    first_step = "(none yet)" in user
    if first_step:
        good = _reply(
            f"Search for the release year of gadget-{tag}.",
            f"ask_search_agent(query='gadget-{tag} release year')",
        )
        if n == 1:
            return [good]
        options = [
            _reply(
                "Try the catalog lookup tool first.",
                f"catalog_lookup('gadget-{tag}')",
            ),
            good,
            _reply(
                "Search with a different phrasing and print the result.",
                f"result = ask_search_agent(query='when was gadget-{tag} released')\nprint(result)",
            ),
            _reply("Keep polling until something arrives.", "while True: pass"),
            f"Thought: I should search for gadget-{tag} but I cannot settle on a query.",
        ]
    else:
        final = _reply("The search result names the year; submit it.", "final_answer('1994')")
        if n == 1:
            return [final]
        options = [
            final,
            _reply("Double-check with the catalog tool.", "catalog_lookup('recheck')"),
            _reply("Recompute the year to be safe.", "calculator('1990 + 4')"),
            _reply("Wait for more data.", "while True: pass"),
            "Thought: the answer is clear, no code needed.",
        ]
    reps = (options * ((n // len(options)) + 1))[:n]
    return reps


def _verifier_reply(user: str) -> str:
    blocks = re.split(r"\n\nStep Set \d+:\n", "\n\n" + user.split("Step Sets:", 1)[-1])
    best = 1
    for i, block in enumerate(blocks[1:], start=1):
        marker = block.find("CURRENT_RESULT: ")
        if marker == -1:
            continue
        result = block[marker + len("CURRENT_RESULT: ") :]
        if not result.startswith(("[error", "[timeout", "[parse_error")):
            best = i
            break
    return json.dumps(
        {"reason": f"candidate {best} executed cleanly and serves the task", "best_id": best}
    )


def scenario_handler(request: ChatRequest) -> Union[str, list[str]]:
    """Scripted reply for any role; deterministic in the request content."""
    user = request.messages[-1][1]
    if request.role_tag == "taskgen":
        return _taskgen_reply(user)
    if request.role_tag == "filegen":
        return _PLAN_REPLY if "given the query:" in user else _FILE_CODE_REPLY
    if request.role_tag == "filter":
        return _CHECK_REPLY
    if request.role_tag == "verifier":
        for _, text in reversed(request.messages):
            if "Step Sets:" in text:
                return _verifier_reply(text)
        return _verifier_reply(user)
    return _controller_reply(request)


def build_backend() -> MockChatBackend:
    return MockChatBackend(handler=scenario_handler, backend_id="scripted")


def build_executor() -> StubExecutor:
    return StubExecutor()
