"""Command line entry points.

Subcommands mirror the pipeline stages so each can be run and inspected
alone: synth, explore, pairs, stats, toy-train, dpo-check, run, infer.
Exit codes: 0 success, 1 usage or validation problem, 2 infrastructure
failure (backend or sandbox).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigInvalid, RunConfig, load_config
from .dpo import batch_from_export, save_trace_csv, self_check, toy_train
from .executor import SandboxDown
from .explorer import TaskAborted, derive_seed, explore_task, infer_task
from .gateway import BackendUnavailable, BudgetExceeded
from .orchestrator import FatalBackendFailure, build_components, run_loop
from .prefstore import PreferenceStore, StorageFailure, build_pairs, read_export_file
from .records import (
    InvariantViolation,
    Task,
    Trajectory,
    canonical_json,
    read_ndjson,
    write_ndjson,
)
from .stats import report
from .taskforge import TaskForge

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFRA = 2


def _load(path: str) -> RunConfig:
    return load_config(path)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steppref",
        description="Step-wise preference data pipeline for tool-using agents.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", required=True, help="path to a TOML run configuration")
        return p

    p = with_config(sub.add_parser("synth", help="synthesize one batch of tasks"))
    p.add_argument("--count", type=int, default=None, help="tasks to accept (default: config quota)")
    p.add_argument("--seed", type=int, default=None, help="batch seed (default: config seed)")
    p.add_argument("--out", default=None, help="output NDJSON (default: <root>/tasks/synth.ndjson)")

    p = with_config(sub.add_parser("explore", help="explore accepted tasks into trajectories"))
    p.add_argument("--tasks", required=True, help="NDJSON of tasks; only accepted ones run")
    p.add_argument("--out", default=None, help="output NDJSON (default: <root>/trajectories/explore.ndjson)")

    p = with_config(sub.add_parser("pairs", help="build and store preference pairs"))
    p.add_argument("--tasks", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--iteration", type=int, default=0)

    p = with_config(sub.add_parser("stats", help="print the diagnostics report for an iteration"))
    p.add_argument("--iteration", type=int, default=0)

    p = with_config(sub.add_parser("toy-train", help="run the toy tuner on an exported dataset"))
    p.add_argument("--iteration", type=int, default=0)
    p.add_argument("--trace", default=None, help="trace CSV path (default: <root>/dpo/cli_trace.csv)")

    p = sub.add_parser("dpo-check", help="run the numeric self-checks")
    p.add_argument("--seed", type=int, default=0)

    p = with_config(sub.add_parser("run", help="run the full iteration loop"))
    p.add_argument("--dry-run", action="store_true", help="validate the config and print the plan")

    p = with_config(sub.add_parser("infer", help="greedy one-candidate runs, no verifier"))
    p.add_argument("--tasks", required=True)
    return parser


def _cmd_synth(args: argparse.Namespace) -> int:
    config = _load(args.config)
    gateway, executor, registry, pool, index = build_components(config)
    forge = TaskForge(
        gateway, executor, registry,
        image_index=index,
        workspace_root=Path(config.root) / "tasks" / "work",
        id_prefix="synth",
    )
    count = args.count if args.count is not None else config.tasks_per_iteration
    seed = args.seed if args.seed is not None else config.seed
    tasks = forge.synthesize(pool, count, seed)
    out = Path(args.out) if args.out else Path(config.root) / "tasks" / "synth.ndjson"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ndjson(out, tasks)
    accepted = sum(1 for t in tasks if t.status == "accepted")
    print(f"synthesized {len(tasks)} tasks ({accepted} accepted) -> {out}")
    return EXIT_OK


def _cmd_explore(args: argparse.Namespace) -> int:
    config = _load(args.config)
    gateway, executor, registry, _, _ = build_components(config)
    tasks = [t for t in read_ndjson(Task, args.tasks) if t.status == "accepted"]
    if not tasks:
        print("no accepted tasks in input", file=sys.stderr)
        return EXIT_USAGE
    cfg = dataclasses.replace(config.explore, seed=derive_seed(config.seed, "explore", 0))
    trajectories = []
    aborted = 0
    for task in tasks:
        workspace = Path(config.root) / "tasks" / "work" / task.id
        workspace.mkdir(parents=True, exist_ok=True)
        try:
            trajectories.append(
                explore_task(gateway, executor, task, registry, cfg, workspace=str(workspace))
            )
        except TaskAborted as exc:
            trajectories.append(exc.trajectory)
            aborted += 1
    out = Path(args.out) if args.out else Path(config.root) / "trajectories" / "explore.ndjson"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ndjson(out, trajectories)
    print(f"explored {len(tasks)} tasks ({aborted} aborted) -> {out}")
    return EXIT_OK


def _cmd_pairs(args: argparse.Namespace) -> int:
    config = _load(args.config)
    tasks = {t.id: t for t in read_ndjson(Task, args.tasks)}
    trajectories = read_ndjson(Trajectory, args.trajectories)
    pairs = []
    for trajectory in trajectories:
        task = tasks.get(trajectory.task_id)
        if task is None:
            print(f"no task for trajectory {trajectory.task_id}", file=sys.stderr)
            return EXIT_USAGE
        if trajectory.steps:
            pairs.extend(build_pairs(task, trajectory, config.explore.observation_cap))
    store = PreferenceStore(config.root)
    manifest = store.append(pairs, iteration_index=args.iteration)
    export = store.export_training_file(args.iteration)
    print(
        f"stored {len(pairs)} pairs (dataset now {manifest.pair_count}) -> "
        f"{store.pairs_path(args.iteration)} and {export}"
    )
    return EXIT_OK


def _cmd_stats(args: argparse.Namespace) -> int:
    config = _load(args.config)
    _, _, registry, _, _ = build_components(config)
    store = PreferenceStore(config.root)
    pairs = store.load_pairs(args.iteration)
    if not pairs:
        print("iteration has no pairs", file=sys.stderr)
        return EXIT_USAGE
    print(canonical_json(report(pairs, tool_names=registry.tools)))
    return EXIT_OK


def _cmd_toy_train(args: argparse.Namespace) -> int:
    config = _load(args.config)
    store = PreferenceStore(config.root)
    export = store.export_path(args.iteration)
    if not export.exists():
        export = store.export_training_file(args.iteration)
    rows = read_export_file(export)
    policy, batch = batch_from_export(rows)
    result = toy_train(policy, batch, config.dpo)
    trace_path = args.trace or str(Path(config.root) / "dpo" / "cli_trace.csv")
    Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
    save_trace_csv(result.trace, trace_path)
    first = result.trace[0] if result.trace else float("nan")
    last = result.trace[-1] if result.trace else float("nan")
    print(f"trained on {len(batch)} pairs: loss {first:.6f} -> {last:.6f}, trace -> {trace_path}")
    return EXIT_OK


def _cmd_dpo_check(args: argparse.Namespace) -> int:
    failures = 0
    for name, ok, detail in self_check(seed=args.seed):
        print(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
        failures += 0 if ok else 1
    return EXIT_OK if failures == 0 else EXIT_USAGE


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load(args.config)
    if args.dry_run:
        plan = {
            "root": config.root,
            "iterations": config.iterations,
            "tasks_per_iteration": config.tasks_per_iteration,
            "candidates_per_step": config.explore.n_candidates,
            "max_steps": config.explore.max_steps,
            "backends": {
                role: config.backend_for(role).kind
                for role in sorted(("controller", "verifier", "taskgen", "filegen", "filter"))
            },
            "sandbox": config.sandbox.mode,
        }
        print(json.dumps(plan, indent=2, sort_keys=True))
        return EXIT_OK
    summary = run_loop(config)
    for outcome in summary.outcomes:
        loss = f"{outcome.final_loss:.6f}" if outcome.final_loss is not None else "-"
        flag = " (resumed)" if outcome.resumed else ""
        print(
            f"iteration {outcome.index}: {outcome.accepted_tasks} tasks, "
            f"{outcome.trajectories} trajectories ({outcome.aborted} aborted), "
            f"{outcome.pair_count} pairs, final loss {loss}{flag}"
        )
    print(f"total pairs: {summary.total_pairs}; model calls: {summary.calls_made}")
    return EXIT_OK


def _cmd_infer(args: argparse.Namespace) -> int:
    config = _load(args.config)
    gateway, executor, registry, _, _ = build_components(config)
    tasks = [t for t in read_ndjson(Task, args.tasks) if t.status == "accepted"]
    if not tasks:
        print("no accepted tasks in input", file=sys.stderr)
        return EXIT_USAGE
    cfg = dataclasses.replace(config.explore, seed=derive_seed(config.seed, "infer", 0))
    for task in tasks:
        workspace = Path(config.root) / "tasks" / "work" / task.id
        workspace.mkdir(parents=True, exist_ok=True)
        try:
            trajectory = infer_task(gateway, executor, task, registry, cfg, workspace=str(workspace))
            answer = trajectory.final_answer if trajectory.terminal else "(no final answer)"
        except TaskAborted as exc:
            answer = f"(aborted: {exc.reason})"
        print(f"{task.id}: {answer}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "explore": _cmd_explore,
    "pairs": _cmd_pairs,
    "stats": _cmd_stats,
    "toy-train": _cmd_toy_train,
    "dpo-check": _cmd_dpo_check,
    "run": _cmd_run,
    "infer": _cmd_infer,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantViolation, StorageFailure, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FatalBackendFailure, BackendUnavailable, BudgetExceeded, SandboxDown) as exc:
        print(f"infrastructure failure: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
