"""
Synthesizing agent tasks from a seed pool
=========================================

No hand-written tasks and no live model: a scripted backend stands in for
the generator, reviser, and filter roles, so this runs offline and prints
the same tasks every time.
"""

import tempfile

from steppref.gateway import ModelGateway, ROLE_TAGS
from steppref.scenario import build_backend, build_executor, scenario_registry, scenario_seed_pool
from steppref.taskforge import TaskForge

# one scripted backend answers every role
backend = build_backend()
gateway = ModelGateway({role: backend for role in ROLE_TAGS})

workdir = tempfile.mkdtemp(prefix="steppref-demo-")
forge = TaskForge(
    gateway,
    build_executor(),
    scenario_registry(),
    workspace_root=workdir,
    id_prefix="demo",
)

# the pool is a list of (query, tools) seeds; synthesis samples a few,
# asks for new queries in the same style, then revises and filters them
pool = scenario_seed_pool()
print(f"seed pool: {len(pool)} entries, e.g. {pool[0].query!r}")

tasks = forge.synthesize(pool, count=3, seed=7)
print(f"synthesized {len(tasks)} tasks ({gateway.calls_made} model calls)\n")

for task in tasks:
    print(f"[{task.status}] {task.id}")
    print(f"  query: {task.query}")
    print(f"  tool hints: {list(task.tool_hints)}")
    if task.status == "rejected":
        print(f"  rejected because: {task.provenance.get('rejected_reason')}")
print(f"\nscratch workspace: {workdir}")
