"""Shared builders for synthetic records used across the test suite."""

from __future__ import annotations

import random

from steppref.records import (
    Action,
    Candidate,
    FileArtifact,
    Observation,
    StepRecord,
    Task,
    Trajectory,
)


def make_action(tag: str) -> Action:
    """A small valid action whose texts are unique per tag."""
    code = f"ask_search_agent(query='{tag}')"
    return Action(
        thought=f"look up {tag}.",
        code=code,
        raw=f"Thought: look up {tag}.\n```\n{code}\n```",
    )


def make_observation(status: str = "ok", output: str = "result") -> Observation:
    if status == "ok":
        return Observation(status="ok", output=output, duration_ms=3)
    if status == "parse_error":
        return Observation(
            status="parse_error",
            error_kind="parse_error",
            error_message="missing code block",
            duration_ms=0,
        )
    return Observation(
        status=status,
        error_kind="tool-error",
        error_message=f"{status} while running",
        duration_ms=3,
    )


def make_candidate(tag: str, status: str = "ok") -> Candidate:
    return Candidate(action=make_action(tag), observation=make_observation(status))


def make_step(index: int, n: int, chosen: int = 1, tag: str = "s") -> StepRecord:
    cands = tuple(make_candidate(f"{tag}{index}c{j}") for j in range(1, n + 1))
    return StepRecord(index=index, candidates=cands, chosen=chosen, verifier_reason="ok tool use")


def make_trajectory(m: int, n: int, rng: random.Random | None = None, tag: str = "t") -> Trajectory:
    """A terminal trajectory with m steps of n all-distinct candidates."""
    rng = rng or random.Random(0)
    steps = tuple(
        make_step(i, n, chosen=rng.randint(1, n), tag=f"{tag}s") for i in range(1, m + 1)
    )
    return Trajectory(task_id=f"task-{tag}", steps=steps, terminal=True, final_answer="done")


def make_task(task_id: str = "task-t", query: str = "What is shown?", status: str = "accepted") -> Task:
    return Task(
        id=task_id,
        query=query,
        files=(
            FileArtifact(
                relative_path="files/chart.png",
                kind="image",
                content_description="a bar chart of monthly sales",
                origin="fixture",
            ),
        ),
        tool_hints=("ask_search_agent",),
        status=status,
    )
