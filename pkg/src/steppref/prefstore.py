"""Builds step-wise preference pairs from trajectories and manages the
growing per-iteration dataset on disk.

For a trajectory of m steps with n candidates each, every step yields one
pair per non-chosen candidate, so m(n-1) pairs when all candidate texts
are distinct. Rejected candidates whose raw text equals the chosen one are
skipped (they carry no preference signal); unparseable candidates are kept
as dispreferred with their raw reply.

Appends are atomic (temp file, fsync, rename) and idempotent per batch via
content digests, so a retried append never duplicates pairs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

from .explorer import build_step_context, history_entry
from .records import (
    DEFAULT_OBSERVATION_CAP,
    InvariantViolation,
    PreferencePair,
    Task,
    Trajectory,
    canonical_json,
    deserialize,
    serialize,
    validate,
)
from .rendering import render_action, render_dispreferred, render_step_context

__all__ = [
    "DatasetManifest",
    "StorageFailure",
    "build_pairs",
    "PreferenceStore",
    "read_export_file",
]


class StorageFailure(RuntimeError):
    """A dataset file could not be written or failed its integrity check."""


@dataclass(frozen=True)
class DatasetManifest:
    iteration_index: int
    pair_count: int
    trajectory_ids: tuple[str, ...]
    content_digest: str
    batch_digests: tuple[str, ...]


def build_pairs(
    task: Task,
    trajectory: Trajectory,
    observation_cap: int = DEFAULT_OBSERVATION_CAP,
) -> list[PreferencePair]:
    """All (context, preferred, dispreferred) triplets of one trajectory.

    The context of step i is rebuilt from the task plus the chosen steps
    1..i-1, exactly as the controller saw it. Works on aborted trajectories
    too: their recorded steps all completed verification.
    """
    problems = validate(trajectory, observation_cap=observation_cap)
    if problems:
        raise InvariantViolation("; ".join(problems))
    if task.id != trajectory.task_id:
        raise InvariantViolation(
            f"trajectory belongs to task {trajectory.task_id!r}, not {task.id!r}"
        )
    pairs: list[PreferencePair] = []
    history: list = []
    for step in trajectory.steps:
        context = build_step_context(task, history)
        chosen = step.candidates[step.chosen - 1]
        for j, cand in enumerate(step.candidates, start=1):
            if j == step.chosen:
                continue
            if cand.action.raw == chosen.action.raw:
                continue
            pairs.append(
                PreferencePair(
                    context=context,
                    preferred=chosen.action,
                    dispreferred=cand.action,
                    meta={
                        "task_id": trajectory.task_id,
                        "step_index": step.index,
                        "chosen_candidate": step.chosen,
                        "rejected_candidate": j,
                        "chosen_status": chosen.observation.status,
                        "rejected_status": cand.observation.status,
                    },
                )
            )
        history.append(history_entry(chosen, observation_cap))
    return pairs


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageFailure(f"cannot write {path}: {exc}") from exc


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class PreferenceStore:
    """One directory per run; one dataset (pairs + manifest) per iteration."""

    def __init__(self, root: Union[str, Path]) -> None:
        self.root = Path(root)

    def dataset_dir(self, iteration_index: int) -> Path:
        return self.root / "datasets" / f"iter_{iteration_index}"

    def pairs_path(self, iteration_index: int) -> Path:
        return self.dataset_dir(iteration_index) / "pairs.ndjson"

    def manifest_path(self, iteration_index: int) -> Path:
        return self.dataset_dir(iteration_index) / "manifest.json"

    def export_path(self, iteration_index: int) -> Path:
        return self.dataset_dir(iteration_index) / "train.ndjson"

    # -- manifest -----------------------------------------------------------

    def read_manifest(self, iteration_index: int) -> Optional[DatasetManifest]:
        path = self.manifest_path(iteration_index)
        if not path.exists():
            return None
        return deserialize(DatasetManifest, path.read_text(encoding="utf-8"))

    def _write_manifest(self, manifest: DatasetManifest) -> None:
        _atomic_write(
            self.manifest_path(manifest.iteration_index),
            serialize(manifest) + b"\n",
        )

    # -- append -------------------------------------------------------------

    def append(self, pairs: Iterable[PreferencePair], iteration_index: int) -> DatasetManifest:
        """Append a batch of pairs to the iteration dataset.

        Re-appending a batch with identical content is a no-op, which makes
        retries after crashes safe.
        """
        pairs = list(pairs)
        self.dataset_dir(iteration_index).mkdir(parents=True, exist_ok=True)
        manifest = self.read_manifest(iteration_index)
        if manifest is None:
            manifest = DatasetManifest(
                iteration_index=iteration_index,
                pair_count=0,
                trajectory_ids=(),
                content_digest=_sha256(b""),
                batch_digests=(),
            )
            _atomic_write(self.pairs_path(iteration_index), b"")
            self._write_manifest(manifest)
        if not pairs:
            return manifest
        batch_digest = _sha256(b"".join(serialize(p) + b"\n" for p in pairs))
        if batch_digest in manifest.batch_digests:
            return manifest
        lines = []
        for offset, pair in enumerate(pairs):
            meta = dict(pair.meta)
            meta["pair_id"] = f"i{iteration_index}-p{manifest.pair_count + offset:06d}"
            meta["iteration"] = iteration_index
            lines.append(serialize(dataclasses.replace(pair, meta=meta)) + b"\n")
        existing = (
            self.pairs_path(iteration_index).read_bytes()
            if self.pairs_path(iteration_index).exists()
            else b""
        )
        content = existing + b"".join(lines)
        _atomic_write(self.pairs_path(iteration_index), content)
        ids = set(manifest.trajectory_ids) | {p.meta["task_id"] for p in pairs}
        manifest = DatasetManifest(
            iteration_index=iteration_index,
            pair_count=manifest.pair_count + len(pairs),
            trajectory_ids=tuple(sorted(ids)),
            content_digest=_sha256(content),
            batch_digests=manifest.batch_digests + (batch_digest,),
        )
        self._write_manifest(manifest)
        return manifest

    # -- read & export ------------------------------------------------------

    def load_pairs(self, iteration_index: int) -> list[PreferencePair]:
        """Read back all pairs of an iteration, verifying the content digest."""
        manifest = self.read_manifest(iteration_index)
        if manifest is None:
            raise StorageFailure(f"no manifest for iteration {iteration_index}")
        data = self.pairs_path(iteration_index).read_bytes()
        if _sha256(data) != manifest.content_digest:
            raise StorageFailure(
                f"integrity check failed for iteration {iteration_index}: "
                "pairs file does not match its manifest digest"
            )
        return [
            deserialize(PreferencePair, line)
            for line in data.decode("utf-8").splitlines()
            if line.strip()
        ]

    def export_training_file(self, iteration_index: int) -> Path:
        """Write the {prompt, chosen, rejected, meta} exchange file."""
        records = []
        for pair in self.load_pairs(iteration_index):
            records.append(
                {
                    "prompt": render_step_context(pair.context),
                    "chosen": render_action(pair.preferred),
                    "rejected": render_dispreferred(pair.dispreferred),
                    "meta": pair.meta,
                }
            )
        payload = "".join(canonical_json(r) + "\n" for r in records)
        path = self.export_path(iteration_index)
        _atomic_write(path, payload.encode("utf-8"))
        return path


def read_export_file(path: Union[str, Path]) -> list[dict]:
    """Load an exported training file back into plain records."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
