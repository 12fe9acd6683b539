"""Task synthesis: queries, file plans, on-disk artifacts, review, filtering.

A forge turns a pool of seed queries into accepted tasks in five moves:
sample seeds and generate fresh queries, plan what files each query needs,
materialize those files (retrieve images from a local index, generate the
rest with model-written code), let a reviewer rewrite queries the files
cannot support, then keep only tasks the reviewer marks solvable. Every
model call retries once with a corrective message before giving up.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from .executor import ExecRequest
from .gateway import ChatRequest, ModelGateway, Sampling
from .jsontext import extract_json_array, extract_json_object
from .prompts import render_template, tool_docs_text
from .records import (
    FILE_KINDS,
    FileArtifact,
    InvariantViolation,
    Task,
    ToolRegistrySpec,
    advance_status,
    validate,
)

__all__ = [
    "FILE_CODE_ATTEMPTS",
    "KIND_EXTENSIONS",
    "RETRIEVAL_THRESHOLD",
    "SEED_SAMPLE_CAP",
    "FilePlan",
    "FilePlanEntry",
    "GenerationFailed",
    "ImageIndex",
    "MalformedReply",
    "RetrievalMiss",
    "Seed",
    "TaskForge",
    "load_seed_pool",
]

logger = logging.getLogger(__name__)

SEED_SAMPLE_CAP = 20
RETRIEVAL_THRESHOLD = 0.3
FILE_CODE_ATTEMPTS = 2
TASKGEN_MAX_TOKENS = 2048
PLAN_MAX_TOKENS = 1024
CODE_MAX_TOKENS = 2048

# target extension per generated (non-image) file kind
KIND_EXTENSIONS = {"pdf": ".pdf", "docx": ".docx", "xlsx": ".xlsx", "mp3": ".mp3", "other": ".txt"}


class MalformedReply(RuntimeError):
    """A model reply broke its output contract twice in a row."""


class RetrievalMiss(LookupError):
    """No indexed image is close enough to a planned description."""


class GenerationFailed(RuntimeError):
    """File-writing code failed to produce the artifact after all attempts."""


@dataclass(frozen=True)
class Seed:
    query: str
    tools: tuple[str, ...] = ()


def load_seed_pool(path: Union[str, Path]) -> list[Seed]:
    """Read one {"query", "tools"} object per NDJSON line."""
    seeds: list[Seed] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if not isinstance(row, dict) or not isinstance(row.get("query"), str):
                raise InvariantViolation(f"{path}:{lineno}: seed row needs a string query")
            tools = row.get("tools", [])
            if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
                raise InvariantViolation(f"{path}:{lineno}: seed tools must be a string list")
            seeds.append(Seed(query=row["query"], tools=tuple(tools)))
    return seeds


@dataclass(frozen=True)
class FilePlanEntry:
    kind: str
    description: str


@dataclass(frozen=True)
class FilePlan:
    info_from_internet: str
    info_from_images: str
    entries: tuple[FilePlanEntry, ...] = ()


# function words would dominate the caption overlap score
_STOPWORDS = frozenset(
    "a an and are at by for from in is it of on or that the this to was with".split()
)


def _word_set(text: str) -> frozenset:
    return frozenset(re.findall(r"[a-z0-9]+", text.lower())) - _STOPWORDS


def _cosine(a: frozenset, b: frozenset) -> float:
    if not a or not b:
        return 0.0
    return len(a & b) / math.sqrt(len(a) * len(b))


class ImageIndex:
    """A directory of images with a caption manifest, searched by caption.

    The manifest is NDJSON with one {"file", "caption"} row per image.
    Retrieval scores token-set cosine similarity between the wanted
    description and each caption; below RETRIEVAL_THRESHOLD is a miss.
    """

    def __init__(self, root: Union[str, Path]) -> None:
        self.root = Path(root)
        manifest = self.root / "manifest.ndjson"
        self.entries: list[tuple[str, str]] = []
        if manifest.exists():
            with open(manifest, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    row = json.loads(line)
                    self.entries.append((row["file"], row["caption"]))

    def retrieve(self, description: str) -> tuple[Path, str]:
        """Best (path, caption) for a description, or RetrievalMiss."""
        wanted = _word_set(description)
        best: Optional[tuple[float, str, str]] = None
        for name, caption in self.entries:
            score = _cosine(wanted, _word_set(caption))
            key = (-score, name)
            if best is None or key < (-best[0], best[1]):
                best = (score, name, caption)
        if best is None or best[0] < RETRIEVAL_THRESHOLD:
            got = f"best score {best[0]:.3f}" if best else "empty index"
            raise RetrievalMiss(f"no image close to {description!r} ({got})")
        return self.root / best[1], best[2]


class TaskForge:
    """Drives the synthesis chain against a gateway and an executor."""

    def __init__(
        self,
        gateway: ModelGateway,
        executor: Any,
        registry: ToolRegistrySpec,
        image_index: Optional[ImageIndex] = None,
        workspace_root: Union[str, Path] = ".",
        id_prefix: str = "task",
    ) -> None:
        self.gateway = gateway
        self.executor = executor
        self.registry = registry
        self.image_index = image_index
        self.workspace_root = Path(workspace_root)
        self.id_prefix = id_prefix
        self._counter = 0
        self._tool_docs = tool_docs_text(registry)

    # -- shared call pattern: parse, or retry once with a correction --------

    def _chat_json(
        self,
        role: str,
        messages: list[tuple[str, str]],
        corrective: str,
        parse,
        max_tokens: int,
        seed: Optional[int] = None,
    ):
        request = ChatRequest(
            role_tag=role,
            messages=tuple(messages),
            sampling=Sampling(temperature=0.0, max_tokens=max_tokens),
            seed=seed,
        )
        reply = self.gateway.with_retry(request)
        try:
            return parse(reply.texts[0])
        except MalformedReply as first:
            retry = ChatRequest(
                role_tag=role,
                messages=tuple(
                    messages + [("assistant", reply.texts[0]), ("user", corrective)]
                ),
                sampling=Sampling(temperature=0.0, max_tokens=max_tokens),
                seed=seed,
            )
            second = self.gateway.with_retry(retry)
            try:
                return parse(second.texts[0])
            except MalformedReply as exc:
                raise MalformedReply(f"{exc} (after retry; first error: {first})") from exc

    # -- 1. queries ----------------------------------------------------------

    def _parse_query_array(self, text: str) -> list[Seed]:
        arr = extract_json_array(text)
        if arr is None:
            raise MalformedReply("reply contains no json array")
        out: list[Seed] = []
        for item in arr:
            if not isinstance(item, dict) or not isinstance(item.get("query"), str):
                raise MalformedReply(f"array item is not a query object: {item!r}")
            if not item["query"].strip():
                raise MalformedReply("empty query string")
            tools = item.get("tools")
            if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
                raise MalformedReply(f"query item lacks a tools list: {item!r}")
            out.append(Seed(query=item["query"], tools=tuple(tools)))
        if not out:
            raise MalformedReply("json array is empty")
        return out

    def generate_queries(self, pool: Sequence[Seed], count: int, seed: int) -> list[Task]:
        """Draft up to ``count`` tasks from a sampled batch of seed queries.

        A malformed batch (after one corrective retry) is dropped with a
        warning rather than aborting the run.
        """
        if count < 1:
            raise InvariantViolation(f"count must be >= 1, got {count}")
        if not pool:
            raise InvariantViolation("seed pool is empty")
        rng = random.Random(seed)
        sample = rng.sample(list(pool), min(SEED_SAMPLE_CAP, len(pool)))
        examples = "\n".join(
            json.dumps({"query": s.query, "tools": list(s.tools)}, ensure_ascii=False)
            for s in sample
        )
        system = render_template("query_gen_system", tool_docs=self._tool_docs)
        user = render_template("query_gen_user", examples_block=examples, count=str(count))
        corrective = (
            "Reply with only a json array of objects, each with a string "
            '"query" and a "tools" list of tool names.'
        )
        try:
            generated = self._chat_json(
                "taskgen", [("system", system), ("user", user)],
                corrective, self._parse_query_array, TASKGEN_MAX_TOKENS, seed=seed,
            )
        except MalformedReply as exc:
            logger.warning("dropping query batch (seed %d): %s", seed, exc)
            return []
        tasks: list[Task] = []
        for item in generated[:count]:
            self._counter += 1
            hints = tuple(t for t in item.tools if t in self.registry.tools)
            tasks.append(
                Task(
                    id=f"{self.id_prefix}-{self._counter:04d}",
                    query=item.query,
                    tool_hints=hints,
                    status="draft",
                    provenance={
                        "batch_seed": seed,
                        "seed_queries": [s.query for s in sample],
                    },
                )
            )
        return tasks

    # -- 2. file plan ---------------------------------------------------------

    def _parse_file_plan(self, text: str) -> FilePlan:
        obj = extract_json_object(text)
        if obj is None:
            raise MalformedReply("reply contains no json object")
        file_block = obj.get("file")
        if not isinstance(file_block, dict):
            raise MalformedReply('plan lacks a "file" object')
        numbers = file_block.get("image_numbers")
        if not isinstance(numbers, int) or isinstance(numbers, bool) or numbers < 0:
            raise MalformedReply(f"image_numbers must be a non-negative int, got {numbers!r}")
        content = file_block.get("image_content", {})
        if numbers > 0 and not isinstance(content, dict):
            raise MalformedReply("image_content must be an object")
        entries: list[FilePlanEntry] = []
        for i in range(1, numbers + 1):
            desc = content.get(f"image_{i}") if isinstance(content, dict) else None
            if not isinstance(desc, str) or not desc.strip():
                raise MalformedReply(f"image_content is missing image_{i}")
            entries.append(FilePlanEntry(kind="image", description=desc.strip()))
        others = file_block.get("other_files", [])
        if not isinstance(others, list):
            raise MalformedReply("other_files must be an array")
        for item in others:
            if not isinstance(item, dict):
                raise MalformedReply(f"other_files item is not an object: {item!r}")
            kind = str(item.get("kind", "")).strip().lower()
            desc = item.get("description")
            if kind not in FILE_KINDS or kind == "image":
                raise MalformedReply(f"unknown non-image file kind {kind!r}")
            if not isinstance(desc, str) or not desc.strip():
                raise MalformedReply("other_files item needs a description")
            entries.append(FilePlanEntry(kind=kind, description=desc.strip()))
        return FilePlan(
            info_from_internet=str(obj.get("information_from_internet", "")),
            info_from_images=str(obj.get("information_from_images", "")),
            entries=tuple(entries),
        )

    def plan_files(self, task: Task) -> FilePlan:
        system = render_template("file_plan_system", tool_docs=self._tool_docs)
        user = render_template("file_plan_user", query=task.query)
        corrective = (
            "Reply with only the json object from the template. image_content "
            "must hold exactly image_numbers entries named image_1, image_2, ..."
        )
        return self._chat_json(
            "filegen", [("system", system), ("user", user)],
            corrective, self._parse_file_plan, PLAN_MAX_TOKENS,
        )

    # -- 3. artifacts on disk --------------------------------------------------

    def _extract_file_code(self, text: str) -> str:
        match = re.search(r"## code start\s*\n(.*?)\n?\s*## code end", text, re.DOTALL)
        if match is None or not match.group(1).strip():
            raise MalformedReply("reply lacks a ## code start / ## code end block")
        return match.group(1)

    def _generate_file(self, task_dir: Path, task_id: str, index: int, entry: FilePlanEntry) -> str:
        relative_path = f"files/file_{index}{KIND_EXTENSIONS[entry.kind]}"
        system = render_template("file_code_system", file_kind=entry.kind)
        user = render_template(
            "file_code_user",
            description=entry.description,
            file_kind=entry.kind,
            relative_path=relative_path,
        )
        messages: list[tuple[str, str]] = [("system", system), ("user", user)]
        last = ""
        for attempt in range(FILE_CODE_ATTEMPTS):
            reply = self.gateway.with_retry(
                ChatRequest(
                    role_tag="filegen",
                    messages=tuple(messages),
                    sampling=Sampling(temperature=0.0, max_tokens=CODE_MAX_TOKENS),
                )
            )
            text = reply.texts[0]
            try:
                code = self._extract_file_code(text)
            except MalformedReply as exc:
                last = str(exc)
            else:
                response = self.executor.exec(
                    ExecRequest(
                        request_id=f"{task_id}-file-{index}-try{attempt}",
                        profile="filegen",
                        prefix_codes=(),
                        candidate_code=code,
                        workspace=str(task_dir),
                    )
                )
                if response.status == "ok" and (task_dir / relative_path).exists():
                    return relative_path
                last = f"exec status {response.status}: {response.error_message or response.output}"
            messages += [
                ("assistant", text),
                (
                    "user",
                    f"That did not work ({last}). Output the template again with "
                    f"code that writes the file to {relative_path} and exits cleanly.",
                ),
            ]
        raise GenerationFailed(f"could not produce {relative_path}: {last}")

    def materialize_files(self, task: Task, plan: FilePlan) -> Task:
        """Write every planned file under <workspace_root>/<task id>/files.

        Image entries come from the index (the artifact description keeps the
        planned content, since that is what downstream prompts should cite);
        the rest are produced by executing model-written code.
        """
        task_dir = self.workspace_root / task.id
        (task_dir / "files").mkdir(parents=True, exist_ok=True)
        artifacts: list[FileArtifact] = []
        image_no = 0
        other_no = 0
        for entry in plan.entries:
            if entry.kind == "image":
                if self.image_index is None:
                    raise RetrievalMiss("task plans an image but no image index is configured")
                source, _caption = self.image_index.retrieve(entry.description)
                image_no += 1
                relative_path = f"files/image_{image_no}{source.suffix.lower()}"
                shutil.copyfile(source, task_dir / relative_path)
                artifacts.append(
                    FileArtifact(
                        relative_path=relative_path,
                        kind="image",
                        content_description=entry.description,
                        origin="retrieved",
                    )
                )
            else:
                other_no += 1
                relative_path = self._generate_file(task_dir, task.id, other_no, entry)
                artifacts.append(
                    FileArtifact(
                        relative_path=relative_path,
                        kind=entry.kind,
                        content_description=entry.description,
                        origin="code_generated",
                    )
                )
        updated = replace(task, files=tuple(artifacts))
        problems = validate(updated)
        if problems:
            raise InvariantViolation("; ".join(problems))
        return updated

    # -- 4 and 5. review and filter ---------------------------------------------

    def _parse_verdict(self, text: str) -> dict[str, str]:
        obj = extract_json_object(text)
        if obj is None:
            raise MalformedReply("reply contains no json object")
        correct = obj.get("correct")
        updated = obj.get("updated_query")
        if not isinstance(correct, str) or correct.strip().lower() not in ("yes", "no"):
            raise MalformedReply(f"verdict correct must be yes or no, got {correct!r}")
        if not isinstance(updated, str):
            raise MalformedReply("verdict lacks updated_query")
        return {
            "correct": correct.strip().lower(),
            "updated_query": updated.strip(),
            "thought": str(obj.get("thought", "")),
        }

    def _file_block(self, task: Task) -> str:
        if not task.files:
            return "(no files)"
        return "\n".join(
            f"- {a.relative_path} ({a.kind}): {a.content_description}" for a in task.files
        )

    def _check(self, task: Task) -> Optional[dict[str, str]]:
        system = render_template("task_check_system", tool_docs=self._tool_docs)
        user = render_template(
            "task_check_user", query=task.query, file_block=self._file_block(task)
        )
        corrective = (
            'Reply with only the json object from the template; "correct" must '
            'be "yes" or "no".'
        )
        try:
            return self._chat_json(
                "filter", [("system", system), ("user", user)],
                corrective, self._parse_verdict, PLAN_MAX_TOKENS,
            )
        except MalformedReply:
            return None

    def revise_task(self, task: Task) -> Task:
        """Let the reviewer rewrite the query to fit the files it got.

        Unchanged when the reviewer says no revision is needed or its reply
        cannot be parsed; either way the task advances to revised.
        """
        verdict = self._check(task)
        query = task.query
        if verdict is not None:
            updated = verdict["updated_query"]
            if updated and "no revision is needed" not in updated.lower():
                query = updated
        revised = advance_status(task, "revised")
        return replace(revised, query=query)

    def filter_task(self, task: Task) -> Task:
        """Accept or reject a revised task on the reviewer's yes/no verdict."""
        verdict = self._check(task)
        if verdict is None:
            rejected = advance_status(task, "rejected")
            return replace(
                rejected,
                provenance={**task.provenance, "rejected_reason": "unparseable verdict"},
            )
        accepted = verdict["correct"] == "yes"
        updated = advance_status(task, "accepted" if accepted else "rejected")
        return replace(
            updated,
            provenance={**task.provenance, "filter_verdict": verdict},
        )

    # -- full chain ----------------------------------------------------------------

    def synthesize(self, pool: Sequence[Seed], count: int, seed: int) -> list[Task]:
        """Run the whole chain; per-task failures reject instead of aborting."""
        out: list[Task] = []
        for task in self.generate_queries(pool, count, seed):
            try:
                plan = self.plan_files(task)
                materialized = self.materialize_files(task, plan)
                revised = self.revise_task(materialized)
                out.append(self.filter_task(revised))
            except (MalformedReply, RetrievalMiss, GenerationFailed, InvariantViolation) as exc:
                logger.warning("rejecting %s: %s", task.id, exc)
                rejected = advance_status(task, "rejected")
                out.append(
                    replace(
                        rejected,
                        provenance={**task.provenance, "rejected_reason": str(exc)},
                    )
                )
        return out
