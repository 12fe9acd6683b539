"""
From one task to step-wise preference pairs
===========================================
"""

import tempfile

from steppref.explorer import ExploreConfig, explore_task
from steppref.gateway import ModelGateway, ROLE_TAGS
from steppref.prefstore import build_pairs
from steppref.scenario import build_backend, build_executor, scenario_registry, scenario_seed_pool
from steppref.taskforge import TaskForge

backend = build_backend()
gateway = ModelGateway({role: backend for role in ROLE_TAGS})
executor = build_executor()
registry = scenario_registry()

workdir = tempfile.mkdtemp(prefix="steppref-demo-")
forge = TaskForge(gateway, executor, registry, workspace_root=workdir, id_prefix="demo")
task = [t for t in forge.synthesize(scenario_seed_pool(), count=1, seed=3)
        if t.status == "accepted"][0]
print(f"task: {task.query}\n")

# n candidate actions per step; the verifier keeps one and the rest become
# the dispreferred side of a pair
cfg = ExploreConfig(n_candidates=4, max_steps=4, seed=11)
trajectory = explore_task(gateway, executor, task, registry, cfg, workspace=workdir)

for step in trajectory.steps:
    print(f"step {step.index}: {len(step.candidates)} candidates, chose #{step.chosen}")
    for j, cand in enumerate(step.candidates, start=1):
        mark = "->" if j == step.chosen else "  "
        code = cand.action.code.replace("\n", "; ")
        print(f"  {mark} [{cand.observation.status:>11}] {code[:68]}")
    print(f"  verifier: {step.verifier_reason}")
print(f"\nterminal: {trajectory.terminal}, final answer: {trajectory.final_answer!r}")

# every non-chosen candidate pairs against the chosen one under the same
# context, so m steps with n candidates give m * (n - 1) pairs
pairs = build_pairs(task, trajectory)
m, n = len(trajectory.steps), cfg.n_candidates
print(f"\npairs: {len(pairs)} (m * (n - 1) = {m} * {n - 1} = {m * (n - 1)})")

sample = pairs[0]
print("\nfirst pair")
print(f"  context query:  {sample.context.query}")
print(f"  history length: {len(sample.context.history)}")
print(f"  preferred:      {sample.preferred.code.splitlines()[0]}")
print(f"  dispreferred:   {sample.dispreferred.code.splitlines()[0]}")
print(f"  statuses:       {sample.meta['chosen_status']} vs {sample.meta['rejected_status']}")
