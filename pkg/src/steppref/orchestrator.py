"""The self-improvement loop: synthesize, explore, store, tune, report.

Each iteration starts a fresh dataset: tasks are synthesized until the
per-iteration quota is met (or twice that many attempts were spent),
every accepted task is explored into a step-verified trajectory, the
resulting preference pairs are stored and exported, a toy tuning pass
records its loss trace, and a diagnostics report is written. Finished
iterations are recorded in state.json, so a rerun resumes after the last
completed one. All randomness flows from the single configured seed, so
scripted backends give byte-identical datasets across runs.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Sequence

from .config import RunConfig
from .dpo import batch_from_export, save_trace_csv, toy_train
from .executor import SocketExecutorClient
from .explorer import TaskAborted, derive_seed, explore_task
from .gateway import BackendUnavailable, BudgetExceeded, HttpChatBackend, ModelGateway, ROLE_TAGS
from .prefstore import PreferenceStore, build_pairs, read_export_file
from .records import Task, Trajectory, canonical_json, read_ndjson, write_ndjson
from .stats import report
from .taskforge import ImageIndex, Seed, TaskForge, load_seed_pool
from . import scenario

__all__ = [
    "FatalBackendFailure",
    "IterationOutcome",
    "RunSummary",
    "build_components",
    "run_loop",
]

logger = logging.getLogger(__name__)

SYNTH_ATTEMPT_FACTOR = 2


class FatalBackendFailure(RuntimeError):
    """A backend died or the budget ran out; completed state is on disk."""


@dataclass(frozen=True)
class IterationOutcome:
    index: int
    accepted_tasks: int
    rejected_tasks: int
    trajectories: int
    aborted: int
    pair_count: int
    final_loss: Optional[float]
    resumed: bool = False


@dataclass(frozen=True)
class RunSummary:
    root: str
    outcomes: tuple[IterationOutcome, ...]
    total_pairs: int
    calls_made: int


def build_components(
    config: RunConfig,
) -> tuple[ModelGateway, Any, Any, list[Seed], Optional[ImageIndex]]:
    """Gateway, executor, registry, seed pool, and image index per config.

    Scripted backends all share one scenario backend; the registry is the
    scenario one unless the caller injects something else into run_loop.
    """
    scripted = scenario.build_backend()
    backends: dict[str, Any] = {}
    for role in ROLE_TAGS:
        spec = config.backend_for(role)
        if spec.kind == "http":
            backends[role] = HttpChatBackend(
                base_url=spec.base_url,
                model=spec.model,
                api_key_env=spec.api_key_env,
                timeout_s=spec.timeout_s,
            )
        else:
            backends[role] = scripted
    gateway = ModelGateway(backends, call_budget=config.call_budget)
    if config.sandbox.mode == "socket":
        executor: Any = SocketExecutorClient(config.sandbox.socket)
    else:
        executor = scenario.build_executor()
    registry = scenario.scenario_registry()
    pool = load_seed_pool(config.seed_pool) if config.seed_pool else scenario.scenario_seed_pool()
    index = ImageIndex(config.image_index) if config.image_index else None
    return gateway, executor, registry, pool, index


def _atomic_json(path: Path, payload: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read_state(path: Path) -> dict[str, Any]:
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {"completed": []}


def _resumed_outcome(root: Path, store: PreferenceStore, k: int) -> IterationOutcome:
    manifest = store.read_manifest(k)
    tasks = read_ndjson(Task, root / "tasks" / f"iter_{k}.ndjson")
    trajectories = read_ndjson(Trajectory, root / "trajectories" / f"iter_{k}.ndjson")
    return IterationOutcome(
        index=k,
        accepted_tasks=sum(1 for t in tasks if t.status == "accepted"),
        rejected_tasks=sum(1 for t in tasks if t.status != "accepted"),
        trajectories=len(trajectories),
        aborted=sum(1 for t in trajectories if t.abort_reason),
        pair_count=manifest.pair_count if manifest else 0,
        final_loss=None,
        resumed=True,
    )


def run_loop(
    config: RunConfig,
    gateway: Optional[ModelGateway] = None,
    executor: Any = None,
    registry: Any = None,
    seed_pool: Optional[Sequence[Seed]] = None,
    image_index: Optional[ImageIndex] = None,
) -> RunSummary:
    """Run the configured number of iterations and return their outcomes.

    Any component can be injected; the rest come from the configuration.
    Raises FatalBackendFailure on transport death or a spent call budget;
    everything completed up to that point stays on disk.
    """
    built = build_components(config)
    gateway = gateway or built[0]
    executor = executor if executor is not None else built[1]
    registry = registry if registry is not None else built[2]
    pool = list(seed_pool) if seed_pool is not None else built[3]
    image_index = image_index if image_index is not None else built[4]

    root = Path(config.root)
    for sub in ("tasks", "trajectories", "reports", "dpo"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    store = PreferenceStore(root)
    state_path = root / "state.json"
    state = _read_state(state_path)
    completed = {int(k) for k in state.get("completed", [])}

    outcomes: list[IterationOutcome] = []
    for k in range(config.iterations):
        resumable = (
            k in completed
            and store.read_manifest(k) is not None
            and (root / "tasks" / f"iter_{k}.ndjson").exists()
            and (root / "trajectories" / f"iter_{k}.ndjson").exists()
        )
        if resumable:
            outcomes.append(_resumed_outcome(root, store, k))
            continue
        try:
            outcomes.append(
                _run_iteration(config, gateway, executor, registry, pool, image_index, store, k)
            )
        except (BackendUnavailable, BudgetExceeded) as exc:
            raise FatalBackendFailure(f"iteration {k}: {exc}") from exc
        completed.add(k)
        _atomic_json(
            state_path,
            json.dumps({"completed": sorted(completed)}, indent=2) + "\n",
        )
    return RunSummary(
        root=str(root),
        outcomes=tuple(outcomes),
        total_pairs=sum(o.pair_count for o in outcomes),
        calls_made=gateway.calls_made,
    )


def _run_iteration(
    config: RunConfig,
    gateway: ModelGateway,
    executor: Any,
    registry: Any,
    pool: Sequence[Seed],
    image_index: Optional[ImageIndex],
    store: PreferenceStore,
    k: int,
) -> IterationOutcome:
    root = Path(config.root)
    forge = TaskForge(
        gateway,
        executor,
        registry,
        image_index=image_index,
        workspace_root=root / "tasks" / "work",
        id_prefix=f"t{k}",
    )

    quota = config.tasks_per_iteration
    accepted: list[Task] = []
    rejected: list[Task] = []
    attempts = 0
    batch_no = 0
    while len(accepted) < quota and attempts < SYNTH_ATTEMPT_FACTOR * quota:
        remaining = quota - len(accepted)
        batch_seed = derive_seed(config.seed, f"synth-iter{k}", batch_no)
        batch = forge.synthesize(pool, remaining, batch_seed)
        attempts += max(len(batch), remaining)
        batch_no += 1
        accepted.extend(t for t in batch if t.status == "accepted")
        rejected.extend(t for t in batch if t.status != "accepted")
    accepted = accepted[:quota]
    if len(accepted) < quota:
        logger.warning(
            "iteration %d: only %d of %d tasks accepted after %d attempts",
            k, len(accepted), quota, attempts,
        )
    write_ndjson(root / "tasks" / f"iter_{k}.ndjson", accepted + rejected)

    explore_cfg = replace(config.explore, seed=derive_seed(config.seed, "explore", k))
    trajectories: list[Trajectory] = []
    pairs = []
    aborted = 0
    for task in accepted:
        workspace = root / "tasks" / "work" / task.id
        workspace.mkdir(parents=True, exist_ok=True)
        try:
            trajectory = explore_task(
                gateway, executor, task, registry, explore_cfg, workspace=str(workspace)
            )
        except TaskAborted as exc:
            trajectory = exc.trajectory
            aborted += 1
            logger.warning("iteration %d: %s aborted: %s", k, task.id, exc.reason)
        trajectories.append(trajectory)
        if trajectory.steps:
            pairs.extend(build_pairs(task, trajectory, config.explore.observation_cap))
    write_ndjson(root / "trajectories" / f"iter_{k}.ndjson", trajectories)

    manifest = store.append(pairs, iteration_index=k)
    final_loss: Optional[float] = None
    if pairs:
        export = store.export_training_file(k)
        policy, batch = batch_from_export(read_export_file(export))
        result = toy_train(policy, batch, config.dpo)
        save_trace_csv(result.trace, str(root / "dpo" / f"iter_{k}_trace.csv"))
        if result.trace:
            final_loss = result.trace[-1]
        rep = report(pairs, tool_names=registry.tools)
        report_json = canonical_json(rep)
    else:
        report_json = canonical_json({"pair_count": 0})
    _atomic_json(root / "reports" / f"iter_{k}.json", report_json + "\n")

    return IterationOutcome(
        index=k,
        accepted_tasks=len(accepted),
        rejected_tasks=len(rejected),
        trajectories=len(trajectories),
        aborted=aborted,
        pair_count=manifest.pair_count,
        final_loss=final_loss,
    )
