"""Direct preference optimization objective and a toy tabular trainer.

The loss operates on four log-probabilities per pair: preferred and
dispreferred completions, each scored under the policy being tuned and
under a frozen reference. Everything here is plain float/numpy math so
the numbers can be checked against closed forms; the toy softmax policy
exists to exercise the objective end to end without any model backend.
"""

from __future__ import annotations

import csv
import hashlib
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .records import InvariantViolation

__all__ = [
    "DIVERGENCE_PATIENCE",
    "DivergenceDetected",
    "DpoConfig",
    "EmptyBatch",
    "NonFiniteInput",
    "PairLogProbs",
    "ToyPolicy",
    "TrainResult",
    "UnknownContextOrAction",
    "batch_from_export",
    "batch_loss",
    "pair_loss",
    "pair_margin",
    "save_trace_csv",
    "self_check",
    "toy_batch_loss",
    "toy_grad",
    "toy_logprob",
    "toy_pair_logprobs",
    "toy_train",
]

DIVERGENCE_PATIENCE = 10


class NonFiniteInput(ValueError):
    """A log-probability or loss term is NaN or infinite."""


class EmptyBatch(ValueError):
    """Loss or gradient requested over zero pairs."""


class UnknownContextOrAction(KeyError):
    """Toy policy lookup for a context or action it does not contain."""


class DivergenceDetected(RuntimeError):
    """Training loss rose for DIVERGENCE_PATIENCE consecutive epochs."""


@dataclass(frozen=True)
class PairLogProbs:
    """Log-probabilities for one preference pair under two models."""

    lp_pre_policy: float
    lp_pre_ref: float
    lp_dis_policy: float
    lp_dis_ref: float

    def values(self) -> tuple[float, float, float, float]:
        return (self.lp_pre_policy, self.lp_pre_ref, self.lp_dis_policy, self.lp_dis_ref)


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    learning_rate: float = 0.5
    epochs: int = 200

    def __post_init__(self) -> None:
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise InvariantViolation(f"beta must be a positive finite float, got {self.beta}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise InvariantViolation(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise InvariantViolation(f"epochs must be non-negative, got {self.epochs}")


def _check_beta(beta: float) -> None:
    if not (math.isfinite(beta) and beta > 0):
        raise InvariantViolation(f"beta must be a positive finite float, got {beta}")


def _check_logprobs(lp: PairLogProbs) -> None:
    for name, value in zip(
        ("lp_pre_policy", "lp_pre_ref", "lp_dis_policy", "lp_dis_ref"), lp.values()
    ):
        if not math.isfinite(value):
            raise NonFiniteInput(f"{name} is not finite: {value}")
        if value > 0:
            raise InvariantViolation(f"{name} is a log-probability and must be <= 0, got {value}")


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow on either tail
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def pair_margin(lp: PairLogProbs, beta: float) -> float:
    """beta-scaled difference of policy-vs-reference log ratios."""
    _check_beta(beta)
    _check_logprobs(lp)
    return beta * (
        (lp.lp_pre_policy - lp.lp_pre_ref) - (lp.lp_dis_policy - lp.lp_dis_ref)
    )


def pair_loss(lp: PairLogProbs, beta: float) -> dict[str, float]:
    """Loss -log sigmoid(margin) and its derivative with respect to the margin."""
    margin = pair_margin(lp, beta)
    loss = _softplus(-margin)
    grad = _sigmoid(margin) - 1.0
    if not math.isfinite(loss):
        raise NonFiniteInput(f"loss overflowed at margin {margin}")
    return {"loss": loss, "grad_wrt_margin": grad}


def batch_loss(pairs: Sequence[PairLogProbs], beta: float) -> float:
    if len(pairs) == 0:
        raise EmptyBatch("batch_loss needs at least one pair")
    return sum(pair_loss(lp, beta)["loss"] for lp in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# Toy tabular policy: independent softmax over a few named actions per context.


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    actions: Mapping[str, tuple[str, ...]]
    logits: Mapping[str, np.ndarray]

    def __post_init__(self) -> None:
        if set(self.actions) != set(self.logits):
            raise InvariantViolation("actions and logits must cover the same contexts")
        for ctx, names in self.actions.items():
            arr = self.logits[ctx]
            if len(names) != len(set(names)):
                raise InvariantViolation(f"duplicate action names in context {ctx!r}")
            if arr.shape != (len(names),):
                raise InvariantViolation(
                    f"context {ctx!r}: {len(names)} actions but logits shape {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInput(f"context {ctx!r} has non-finite logits")

    @staticmethod
    def uniform(actions: Mapping[str, Sequence[str]]) -> "ToyPolicy":
        return ToyPolicy(
            actions={c: tuple(names) for c, names in actions.items()},
            logits={c: np.zeros(len(names)) for c, names in actions.items()},
        )

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(
            actions=dict(self.actions),
            logits={c: arr.copy() for c, arr in self.logits.items()},
        )


def _action_index(policy: ToyPolicy, context: str, action: str) -> int:
    if context not in policy.actions:
        raise UnknownContextOrAction(f"unknown context {context!r}")
    try:
        return policy.actions[context].index(action)
    except ValueError:
        raise UnknownContextOrAction(
            f"unknown action {action!r} in context {context!r}"
        ) from None


def toy_logprob(policy: ToyPolicy, context: str, action: str) -> float:
    idx = _action_index(policy, context, action)
    arr = policy.logits[context]
    m = float(arr.max())
    lse = m + math.log(float(np.exp(arr - m).sum()))
    return float(arr[idx]) - lse


# A training item names one context plus its preferred/dispreferred actions.
TrainItem = tuple[str, str, str]


def toy_pair_logprobs(policy: ToyPolicy, ref: ToyPolicy, item: TrainItem) -> PairLogProbs:
    ctx, pre, dis = item
    return PairLogProbs(
        lp_pre_policy=toy_logprob(policy, ctx, pre),
        lp_pre_ref=toy_logprob(ref, ctx, pre),
        lp_dis_policy=toy_logprob(policy, ctx, dis),
        lp_dis_ref=toy_logprob(ref, ctx, dis),
    )


def toy_batch_loss(
    policy: ToyPolicy, ref: ToyPolicy, batch: Sequence[TrainItem], beta: float
) -> float:
    if len(batch) == 0:
        raise EmptyBatch("toy_batch_loss needs at least one item")
    return batch_loss([toy_pair_logprobs(policy, ref, it) for it in batch], beta)


def toy_grad(
    policy: ToyPolicy, ref: ToyPolicy, batch: Sequence[TrainItem], beta: float
) -> dict[str, np.ndarray]:
    """Exact mean gradient of the batch loss with respect to policy logits.

    For one pair the log-softmax normalizers of the preferred and
    dispreferred terms cancel, leaving (sigmoid(margin) - 1) * beta *
    (e_pre - e_dis); each gradient therefore sums to zero per context.
    """
    if len(batch) == 0:
        raise EmptyBatch("toy_grad needs at least one item")
    _check_beta(beta)
    grads = {ctx: np.zeros_like(arr) for ctx, arr in policy.logits.items()}
    for item in batch:
        ctx, pre, dis = item
        i_pre = _action_index(policy, ctx, pre)
        i_dis = _action_index(policy, ctx, dis)
        margin = pair_margin(toy_pair_logprobs(policy, ref, item), beta)
        g = (_sigmoid(margin) - 1.0) * beta
        grads[ctx][i_pre] += g
        grads[ctx][i_dis] -= g
    n = len(batch)
    return {ctx: arr / n for ctx, arr in grads.items()}


@dataclass(frozen=True)
class TrainResult:
    policy: ToyPolicy
    trace: tuple[float, ...] = field(default=())


def toy_train(initial: ToyPolicy, batch: Sequence[TrainItem], config: DpoConfig) -> TrainResult:
    """Full-batch gradient descent against a frozen copy of the start point.

    The trace records the loss at the start of each epoch, so its length
    equals config.epochs. Raises DivergenceDetected if the loss rises for
    DIVERGENCE_PATIENCE epochs in a row.
    """
    ref = initial.copy()
    policy = initial.copy()
    trace: list[float] = []
    rising = 0
    previous: float | None = None
    for _ in range(config.epochs):
        loss = toy_batch_loss(policy, ref, batch, config.beta)
        trace.append(loss)
        if previous is not None and loss > previous:
            rising += 1
            if rising >= DIVERGENCE_PATIENCE:
                raise DivergenceDetected(
                    f"loss rose {rising} epochs running, last {loss:.6g}"
                )
        else:
            rising = 0
        previous = loss
        grads = toy_grad(policy, ref, batch, config.beta)
        for ctx, g in grads.items():
            policy.logits[ctx] -= config.learning_rate * g
    return TrainResult(policy=policy, trace=tuple(trace))


# ---------------------------------------------------------------------------
# Adapters.


def _digest12(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def batch_from_export(
    records: Iterable[Mapping[str, object]],
) -> tuple[ToyPolicy, list[TrainItem]]:
    """Map exported training rows onto a fresh uniform toy policy.

    Contexts and actions become short content digests, so identical prompts
    share a context and identical completions share an action. The returned
    policy starts uniform over every action seen in each context.
    """
    actions: dict[str, set[str]] = {}
    items: list[TrainItem] = []
    for row in records:
        prompt = row["prompt"]
        chosen = row["chosen"]
        rejected = row["rejected"]
        if not isinstance(prompt, str) or not isinstance(chosen, str) or not isinstance(rejected, str):
            raise InvariantViolation("export rows need string prompt/chosen/rejected")
        ctx = "c" + _digest12(prompt)
        a_pre = "a" + _digest12(chosen)
        a_dis = "a" + _digest12(rejected)
        if a_pre == a_dis:
            raise InvariantViolation("chosen and rejected texts are identical")
        actions.setdefault(ctx, set()).update((a_pre, a_dis))
        items.append((ctx, a_pre, a_dis))
    if not items:
        raise EmptyBatch("no usable rows in export")
    policy = ToyPolicy.uniform({ctx: tuple(sorted(names)) for ctx, names in actions.items()})
    return policy, items


def save_trace_csv(trace: Sequence[float], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(trace):
            writer.writerow([epoch, repr(float(loss))])


# ---------------------------------------------------------------------------
# Self-checks for the command line: quick numeric laws with no fixtures.


def self_check(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Run fast numeric identities and a finite-difference probe.

    Returns (name, passed, detail) per check; the CLI prints one line each.
    """
    rng = random.Random(seed)
    results: list[tuple[str, bool, str]] = []

    same = PairLogProbs(-1.0, -1.0, -2.0, -2.0)
    err = abs(pair_loss(same, 0.1)["loss"] - math.log(2))
    results.append(("identity_ln2", err < 1e-12, f"|loss-ln2|={err:.3e}"))

    hand = pair_margin(PairLogProbs(-1.0, -2.0, -3.0, -2.5), 0.1)
    results.append(("margin_hand_value", abs(hand - 0.15) < 1e-12, f"margin={hand!r}"))

    lp_big = PairLogProbs(-1e4 - 1.0, -1.0, -1.0, -1.0)
    big = pair_loss(lp_big, 1.0)["loss"]
    results.append(
        ("stable_at_1e4", math.isfinite(big) and abs(big - 1e4) < 1.0, f"loss={big:.6g}")
    )

    shifted_ok = True
    for _ in range(10):
        a = PairLogProbs(
            -rng.uniform(0.1, 4), -rng.uniform(0.1, 4), -rng.uniform(0.1, 4), -rng.uniform(0.1, 4)
        )
        s = -rng.uniform(0, 2)
        b = PairLogProbs(a.lp_pre_policy, a.lp_pre_ref + s, a.lp_dis_policy, a.lp_dis_ref + s)
        if abs(pair_margin(a, 0.3) - pair_margin(b, 0.3)) > 1e-12:
            shifted_ok = False
    results.append(("reference_shift_invariance", shifted_ok, "10 random shifts"))

    worst = 0.0
    for _ in range(20):
        names = tuple(f"a{k}" for k in range(rng.randint(2, 5)))
        policy = ToyPolicy(
            actions={"c": names},
            logits={"c": np.array([rng.gauss(0, 1) for _ in names])},
        )
        ref = ToyPolicy(
            actions={"c": names},
            logits={"c": np.array([rng.gauss(0, 1) for _ in names])},
        )
        pre, dis = rng.sample(names, 2)
        batch = [("c", pre, dis)]
        analytic = toy_grad(policy, ref, batch, 0.3)["c"]
        h = 1e-6
        for k in range(len(names)):
            up = {"c": policy.logits["c"].copy()}
            up["c"][k] += h
            down = {"c": policy.logits["c"].copy()}
            down["c"][k] -= h
            fd = (
                toy_batch_loss(ToyPolicy(actions=policy.actions, logits=up), ref, batch, 0.3)
                - toy_batch_loss(ToyPolicy(actions=policy.actions, logits=down), ref, batch, 0.3)
            ) / (2 * h)
            rel = abs(analytic[k] - fd) / max(1.0, abs(analytic[k]), abs(fd))
            worst = max(worst, rel)
    results.append(("gradient_finite_difference", worst < 1e-6, f"max_rel_err={worst:.3e}"))

    return results
