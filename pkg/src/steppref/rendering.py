"""Text renderings shared across prompt building and dataset export.

The controller prompt, the verifier prompt, and the exported training
records must all agree on how a step context and an action are written
out; keeping the renderings here is what makes the exported prompt
byte-identical to what the controller actually saw.
"""

from __future__ import annotations

from .records import Action, Observation, StepContext

__all__ = [
    "render_action",
    "render_dispreferred",
    "render_observation",
    "render_step_context",
]


def render_action(action: Action) -> str:
    """The canonical thought+code rendering of a parsed action."""
    return f"Thought: {action.thought}\nCode:\n```\n{action.code}\n```"


def render_dispreferred(action: Action) -> str:
    """Rendering for the rejected side of a pair.

    Placeholder actions from unparseable replies keep their raw text, so
    the dataset preserves exactly what the model emitted.
    """
    if not action.thought and not action.code:
        return action.raw
    return render_action(action)


def render_observation(obs: Observation) -> str:
    """One-line result text: the output when ok, a tagged error otherwise."""
    if obs.status == "ok":
        return obs.output if obs.output else "(empty output)"
    kind = obs.error_kind or obs.status
    message = obs.error_message or ""
    return f"[{obs.status}:{kind}] {message}".rstrip()


def render_step_context(context: StepContext) -> str:
    """The controller's user message for one step: task, files, history."""
    parts = [f"Task: {context.query}"]
    if context.file_summaries:
        lines = "\n".join(f"- {s}" for s in context.file_summaries)
        parts.append(f"Files:\n{lines}")
    if context.history:
        blocks = []
        for i, h in enumerate(context.history, start=1):
            blocks.append(
                f"Step {i}:\n"
                f"Thought: {h.thought}\n"
                f"Code:\n```\n{h.code}\n```\n"
                f"Observation: {h.output}"
            )
        parts.append("History:\n" + "\n\n".join(blocks))
    else:
        parts.append("History:\n(none yet)")
    parts.append("Give your next step.")
    return "\n\n".join(parts)
