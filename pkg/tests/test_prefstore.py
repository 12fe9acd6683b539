"""Pair construction counts and dataset append/export semantics."""

from __future__ import annotations

import dataclasses
import random

import pytest

from helpers import make_candidate, make_step, make_task, make_trajectory
from steppref.prefstore import (
    DatasetManifest,
    PreferenceStore,
    StorageFailure,
    build_pairs,
    read_export_file,
)
from steppref.records import (
    Action,
    Candidate,
    Observation,
    StepRecord,
    Trajectory,
    validate,
)
from steppref.rendering import render_step_context


def _task_for(traj: Trajectory):
    return make_task(task_id=traj.task_id)


def test_m3_n5_all_distinct_yields_12_pairs():
    traj = make_trajectory(m=3, n=5)
    pairs = build_pairs(_task_for(traj), traj)
    assert len(pairs) == 12


def test_minimum_width_yields_one_pair():
    traj = make_trajectory(m=1, n=2)
    assert len(build_pairs(_task_for(traj), traj)) == 1


def _seven_pair_trajectory(task_id: str = "task-t") -> Trajectory:
    # m=2, n=5; at step 1 one rejected candidate repeats the chosen text,
    # so that step yields 3 pairs instead of 4; step 2 yields 4. Total 7.
    step1 = make_step(1, 5, chosen=2, tag="a")
    dup = step1.candidates[1]
    cands = list(step1.candidates)
    cands[4] = dup
    step1 = dataclasses.replace(step1, candidates=tuple(cands))
    step2 = make_step(2, 5, chosen=1, tag="b")
    return Trajectory(task_id=task_id, steps=(step1, step2), terminal=True, final_answer="x")


def test_duplicate_of_chosen_is_dropped():
    traj = _seven_pair_trajectory()
    pairs = build_pairs(make_task(task_id="task-t"), traj)
    assert len(pairs) == 7


def test_parse_error_candidates_become_dispreferred():
    ok = make_candidate("good")
    bad = Candidate(
        action=Action(thought="", code="", raw="fenceless reply"),
        observation=Observation(
            status="parse_error", error_kind="parse_error", error_message="missing code block"
        ),
    )
    step = StepRecord(index=1, candidates=(ok, bad), chosen=1, verifier_reason="r")
    traj = Trajectory(task_id="task-t", steps=(step,), terminal=True, final_answer="x")
    pairs = build_pairs(make_task(task_id="task-t"), traj)
    assert len(pairs) == 1
    assert pairs[0].dispreferred.raw == "fenceless reply"
    assert pairs[0].meta["rejected_status"] == "parse_error"
    assert validate(pairs[0]) == []


def test_contexts_carry_growing_history():
    traj = make_trajectory(m=3, n=2)
    pairs = build_pairs(_task_for(traj), traj)
    by_step = {p.meta["step_index"]: p for p in pairs}
    assert len(by_step[1].context.history) == 0
    assert len(by_step[2].context.history) == 1
    assert len(by_step[3].context.history) == 2
    chosen1 = traj.steps[0].candidates[traj.steps[0].chosen - 1]
    assert by_step[2].context.history[0].code == chosen1.action.code


def test_no_self_pairs_on_random_trajectories():
    rng = random.Random(13)
    for i in range(30):
        traj = make_trajectory(m=rng.randint(1, 5), n=rng.randint(2, 6), rng=rng, tag=f"r{i}")
        for pair in build_pairs(_task_for(traj), traj):
            assert pair.preferred.raw != pair.dispreferred.raw


def test_task_trajectory_mismatch_rejected():
    traj = make_trajectory(m=1, n=2)
    from steppref.records import InvariantViolation

    with pytest.raises(InvariantViolation):
        build_pairs(make_task(task_id="other"), traj)


def test_append_accumulates_and_is_idempotent(tmp_path):
    store = PreferenceStore(tmp_path)
    t1, t2 = make_trajectory(m=3, n=5, tag="x"), _seven_pair_trajectory("task-y")
    p1 = build_pairs(make_task(task_id=t1.task_id), t1)
    p2 = build_pairs(make_task(task_id=t2.task_id), t2)
    manifest = store.append(p1, iteration_index=0)
    assert manifest.pair_count == 12
    manifest = store.append(p2, iteration_index=0)
    assert manifest.pair_count == 19
    again = store.append(p2, iteration_index=0)
    assert again.pair_count == 19
    assert len(again.batch_digests) == 2
    assert set(again.trajectory_ids) == {t1.task_id, t2.task_id}


def test_pair_ids_are_unique_and_iteration_scoped(tmp_path):
    store = PreferenceStore(tmp_path)
    traj = make_trajectory(m=2, n=3)
    pairs = build_pairs(_task_for(traj), traj)
    store.append(pairs, iteration_index=0)
    store.append(pairs, iteration_index=1)
    ids0 = [p.meta["pair_id"] for p in store.load_pairs(0)]
    ids1 = [p.meta["pair_id"] for p in store.load_pairs(1)]
    assert len(set(ids0)) == len(ids0)
    assert not set(ids0) & set(ids1)


def test_export_schema_and_prompt_fidelity(tmp_path):
    store = PreferenceStore(tmp_path)
    traj = make_trajectory(m=3, n=5)
    pairs = build_pairs(_task_for(traj), traj)
    store.append(pairs, iteration_index=0)
    path = store.export_training_file(0)
    records = read_export_file(path)
    assert len(records) == 12
    for rec, pair in zip(records, store.load_pairs(0)):
        assert set(rec) == {"prompt", "chosen", "rejected", "meta"}
        assert rec["prompt"] == render_step_context(pair.context)
        assert rec["chosen"].startswith("Thought: ")
        assert rec["meta"]["pair_id"] == pair.meta["pair_id"]


def test_export_empty_dataset(tmp_path):
    store = PreferenceStore(tmp_path)
    store.append([], iteration_index=0)
    path = store.export_training_file(0)
    assert path.read_bytes() == b""


def test_tampered_pairs_file_fails_integrity(tmp_path):
    store = PreferenceStore(tmp_path)
    traj = make_trajectory(m=1, n=2)
    store.append(build_pairs(_task_for(traj), traj), iteration_index=0)
    with open(store.pairs_path(0), "a", encoding="utf-8") as fh:
        fh.write("{}\n")
    with pytest.raises(StorageFailure):
        store.export_training_file(0)


def test_missing_manifest_reported(tmp_path):
    store = PreferenceStore(tmp_path)
    with pytest.raises(StorageFailure):
        store.load_pairs(3)


def test_manifest_round_trip(tmp_path):
    store = PreferenceStore(tmp_path)
    traj = make_trajectory(m=2, n=2)
    written = store.append(build_pairs(_task_for(traj), traj), iteration_index=5)
    read = store.read_manifest(5)
    assert read == written
    assert isinstance(read, DatasetManifest)
