"""
The preference objective on a tabular policy
============================================

The loss for one pair is softplus of the negated margin, where the margin
is beta times the policy-vs-reference log-ratio difference between the
preferred and dispreferred action. Two things are easy to see at toy
scale: an untrained policy pays ln 2 per pair, and gradient descent pushes
probability onto whatever the pairs prefer.
"""

import math
import random

import numpy as np

from steppref.dpo import DpoConfig, PairLogProbs, ToyPolicy, pair_loss, toy_train

# -- 1. the identity baseline -----------------------------------------------
# policy == reference means zero margin for every pair, and softplus(0) = ln 2
lp = PairLogProbs(
    lp_pre_policy=-1.3, lp_pre_ref=-1.3,
    lp_dis_policy=-0.6, lp_dis_ref=-0.6,
)
out = pair_loss(lp, beta=0.1)
print(f"identity pair loss: {out['loss']:.12f} (ln 2 = {math.log(2):.12f})")

# -- 2. planted preferences --------------------------------------------------
# 20 contexts with 4 actions each; one action per context is marked as the
# winner and paired against the other three
rng = random.Random(97)
actions = {f"ctx{i}": ("north", "south", "east", "west") for i in range(20)}
planted = {ctx: rng.randrange(4) for ctx in actions}

batch = []
for ctx, names in actions.items():
    pre = names[planted[ctx]]
    batch.extend((ctx, pre, dis) for dis in names if dis != pre)
print(f"training batch: {len(batch)} pairs over {len(actions)} contexts")

# -- 3. full-batch descent ---------------------------------------------------
result = toy_train(
    ToyPolicy.uniform(actions),
    batch,
    DpoConfig(beta=0.1, learning_rate=0.5, epochs=200),
)

trace = result.trace
print(f"loss: {trace[0]:.6f} (epoch 0) -> {trace[99]:.6f} (epoch 100) -> {trace[-1]:.6f} (last)")

hits = sum(
    1 for ctx in actions
    if int(np.argmax(result.policy.logits[ctx])) == planted[ctx]
)
print(f"argmax matches the planted action in {hits}/{len(actions)} contexts")

ctx = "ctx0"
logits = result.policy.logits[ctx]
probs = np.exp(logits - logits.max())
probs /= probs.sum()
winner = actions[ctx][planted[ctx]]
print(f"\n{ctx} (planted winner: {winner})")
for name, p in zip(actions[ctx], probs):
    bar = "#" * int(round(40 * p))
    print(f"  {name:>5} {p:6.3f} {bar}")
