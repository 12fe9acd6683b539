"""Shared pytest hooks.

After a run that touched test_acceptance.py, print one verdict line per
guarantee so the outcome can be read without scrolling through the dots.
"""

from __future__ import annotations

ACCEPTANCE_FILE = "test_acceptance.py"

_LABELS = {
    "test_pair_count_law": "pair-count law m(n-1)",
    "test_identity_policy_pairs_cost_ln2": "identity-policy loss equals ln 2",
    "test_toy_gradient_matches_finite_differences": "analytic gradient vs finite differences",
    "test_planted_preferences_are_learned": "planted preference satisfaction",
    "test_full_run_is_deterministic": "end-to-end determinism",
    "test_chosen_steps_fail_less_often": "directional error rate",
    "test_bleu_matches_brute_force": "BLEU oracle equivalence",
    "test_chosen_prefix_replay_reproduces_observations": "replay soundness",
}

_verdicts: dict[str, bool] = {}


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call":
        _verdicts[name] = report.passed
    elif report.failed:
        # a setup or teardown crash still fails the check
        _verdicts[name] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _verdicts:
        return
    terminalreporter.write_sep("-", "acceptance")
    for name, ok in _verdicts.items():
        label = _LABELS.get(name, name)
        terminalreporter.write_line(f"ACCEPTANCE {label}: {'PASS' if ok else 'FAIL'}")
