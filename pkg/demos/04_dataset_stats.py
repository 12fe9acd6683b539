"""
Diagnosing a preference dataset
===============================

Runs one full iteration offline, then reads the stored pairs back and
computes the report the pipeline writes after every iteration: error rates
by side, tool-call histograms with their distribution gap, and BLEU overlap
between rejected and chosen steps.
"""

import tempfile
from pathlib import Path

from steppref.config import load_config
from steppref.orchestrator import run_loop
from steppref.prefstore import PreferenceStore
from steppref.scenario import scenario_registry
from steppref.stats import report

root = Path(tempfile.mkdtemp(prefix="steppref-demo-")) / "run"
config_path = root.parent / "run.toml"
config_path.write_text(
    f'[run]\nroot = "{root}"\n'
    "iterations = 1\ntasks_per_iteration = 6\nseed = 13\n"
    "[explore]\nn_candidates = 5\nmax_steps = 4\n"
    "[dpo]\nepochs = 50\n"
)

summary = run_loop(load_config(config_path))
outcome = summary.outcomes[0]
print(
    f"iteration 0: {outcome.accepted_tasks} tasks, {outcome.trajectories} "
    f"trajectories, {outcome.pair_count} pairs, final loss {outcome.final_loss:.6f}"
)

pairs = PreferenceStore(root).load_pairs(0)
rep = report(pairs, tool_names=scenario_registry().tools)

print(f"\npairs analyzed: {rep.pair_count}")

# chosen steps should fail far less often than rejected ones, because the
# verifier penalizes failed executions
print(f"error rate, chosen side:   {rep.error_rate_chosen:.3f}")
print(f"error rate, rejected side: {rep.error_rate_rejected:.3f}")

print("\ntool calls (chosen vs rejected)")
for tool in sorted(set(rep.tool_counts_chosen) | set(rep.tool_counts_rejected)):
    c = rep.tool_counts_chosen.get(tool, 0)
    r = rep.tool_counts_rejected.get(tool, 0)
    print(f"  {tool:>20} {c:4d} {r:4d}")
print(f"tool distribution gap: {rep.tool_distribution_diff:.1f} (total variation x 100)")

# low BLEU between the rejected text and its chosen sibling means the pair
# carries real contrast rather than a near-duplicate
print("\nrejected-vs-chosen BLEU by n-gram order")
for order, score in sorted(rep.bleu.items()):
    print(f"  n={order}: {score:.4f}")

print(f"\nartifacts under: {root}")
