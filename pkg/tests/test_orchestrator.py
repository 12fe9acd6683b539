"""Iteration loop: layout, determinism, resume, budget death, aborts."""

from __future__ import annotations

import json

import pytest

from steppref.config import load_config
from steppref.gateway import MockChatBackend, ModelGateway
from steppref.orchestrator import FatalBackendFailure, run_loop
from steppref.records import Task, Trajectory, read_ndjson
from steppref.scenario import build_executor, scenario_handler, scenario_registry
from steppref.prefstore import PreferenceStore


def _config(tmp_path, name="run", iterations=2, quota=2, budget=None, epochs=25):
    budget_line = f"call_budget = {budget}\n" if budget else ""
    text = (
        f'[run]\nroot = "{tmp_path / name}"\n'
        f"iterations = {iterations}\ntasks_per_iteration = {quota}\nseed = 13\n"
        f"{budget_line}"
        "[explore]\nn_candidates = 3\nmax_steps = 4\n"
        f"[dpo]\nepochs = {epochs}\n"
    )
    path = tmp_path / f"{name}.toml"
    path.write_text(text)
    return load_config(path)


def test_run_loop_writes_full_layout(tmp_path):
    config = _config(tmp_path)
    summary = run_loop(config)
    root = tmp_path / "run"
    assert len(summary.outcomes) == 2
    for outcome in summary.outcomes:
        k = outcome.index
        assert outcome.accepted_tasks == 2
        assert outcome.trajectories == 2 and outcome.aborted == 0
        assert outcome.pair_count > 0
        assert outcome.final_loss is not None
        assert (root / "tasks" / f"iter_{k}.ndjson").exists()
        assert (root / "trajectories" / f"iter_{k}.ndjson").exists()
        assert (root / "datasets" / f"iter_{k}" / "pairs.ndjson").exists()
        assert (root / "datasets" / f"iter_{k}" / "manifest.json").exists()
        assert (root / "datasets" / f"iter_{k}" / "train.ndjson").exists()
        assert (root / "reports" / f"iter_{k}.json").exists()
        assert (root / "dpo" / f"iter_{k}_trace.csv").exists()
    assert summary.total_pairs == sum(o.pair_count for o in summary.outcomes)
    state = json.loads((root / "state.json").read_text())
    assert state["completed"] == [0, 1]
    # trajectories round-trip and all reached a final answer
    trajectories = read_ndjson(Trajectory, root / "trajectories" / "iter_0.ndjson")
    assert all(t.terminal and t.final_answer for t in trajectories)
    # the tuning loss went down
    trace = (root / "dpo" / "iter_0_trace.csv").read_text().strip().splitlines()
    first = float(trace[1].split(",")[1])
    last = float(trace[-1].split(",")[1])
    assert last < first


def test_run_loop_is_deterministic_across_roots(tmp_path):
    summary_a = run_loop(_config(tmp_path, name="a"))
    summary_b = run_loop(_config(tmp_path, name="b"))
    assert summary_a.total_pairs == summary_b.total_pairs
    for k in range(2):
        for rel in (
            f"datasets/iter_{k}/pairs.ndjson",
            f"datasets/iter_{k}/manifest.json",
            f"datasets/iter_{k}/train.ndjson",
            f"reports/iter_{k}.json",
            f"dpo/iter_{k}_trace.csv",
        ):
            a = (tmp_path / "a" / rel).read_bytes()
            b = (tmp_path / "b" / rel).read_bytes()
            assert a == b, f"{rel} differs between identical runs"


def test_run_loop_resumes_completed_iterations(tmp_path):
    config = _config(tmp_path)
    first = run_loop(config)
    assert first.calls_made > 0
    second = run_loop(config)
    assert all(o.resumed for o in second.outcomes)
    assert second.calls_made == 0
    assert second.total_pairs == first.total_pairs
    assert [o.pair_count for o in second.outcomes] == [o.pair_count for o in first.outcomes]


def test_run_loop_budget_death_then_recovery(tmp_path):
    lean = _config(tmp_path, budget=3)
    with pytest.raises(FatalBackendFailure):
        run_loop(lean)
    root = tmp_path / "run"
    state_missing_or_empty = (
        not (root / "state.json").exists()
        or json.loads((root / "state.json").read_text())["completed"] == []
    )
    assert state_missing_or_empty
    # a rerun with enough budget completes both iterations from scratch
    summary = run_loop(_config(tmp_path, budget=None))
    assert len(summary.outcomes) == 2
    assert all(not o.resumed for o in summary.outcomes)


def test_run_loop_with_unparseable_controller_still_finishes(tmp_path):
    def handler(request):
        if request.role_tag == "controller":
            return ["Thought: no code from me."] * request.sampling.n_samples
        return scenario_handler(request)

    backend = MockChatBackend(handler=handler)
    gateway = ModelGateway(
        {r: backend for r in ("controller", "verifier", "taskgen", "filegen", "filter")},
        sleep=lambda s: None,
    )
    config = _config(tmp_path, name="aborts", iterations=1)
    summary = run_loop(
        config,
        gateway=gateway,
        executor=build_executor(),
        registry=scenario_registry(),
    )
    outcome = summary.outcomes[0]
    assert outcome.accepted_tasks == 2
    assert outcome.aborted == 2
    assert outcome.pair_count == 0
    assert outcome.final_loss is None
    report = json.loads((tmp_path / "aborts" / "reports" / "iter_0.json").read_text())
    assert report == {"pair_count": 0}
    # aborted trajectories persist with their abort reason
    trajectories = read_ndjson(Trajectory, tmp_path / "aborts" / "trajectories" / "iter_0.ndjson")
    assert len(trajectories) == 2
    assert all(t.abort_reason and not t.terminal for t in trajectories)


def test_run_loop_pairs_reload_cleanly(tmp_path):
    config = _config(tmp_path, name="reload", iterations=1)
    summary = run_loop(config)
    store = PreferenceStore(tmp_path / "reload")
    pairs = store.load_pairs(0)
    assert len(pairs) == summary.outcomes[0].pair_count
    tasks = read_ndjson(Task, tmp_path / "reload" / "tasks" / "iter_0.ndjson")
    task_ids = {t.id for t in tasks}
    assert {p.meta["task_id"] for p in pairs} <= task_ids
