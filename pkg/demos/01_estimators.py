"""
Four ways through a discrete choice
===================================

A two-stage model first scores four answers, then scores rationales given
the chosen answer. The choice is discrete, so something has to carry
gradient from the second stage back into the first. This script puts the
four mechanisms side by side on a single hand-made distribution.

Run with ``python3 demos/01_estimators.py``.
"""

import numpy as np

from jointvcr import autodiff as ad
from jointvcr import relax as R
from jointvcr.autodiff import Tape, Tensor

np.set_printoptions(precision=4, suppress=True)
rng = np.random.default_rng(0)

# Answer logits for one question, and a pretend "rationale loss" for each
# answer we could hand to the second stage.
logits = np.array([1.2, 0.3, -0.5, 0.0])
per_answer_loss = np.array([0.4, 1.9, 2.5, 1.1])
reps = rng.normal(size=(4, 3))  # one 3-d representation per answer

dist = R.AnswerDistribution.from_logits(Tensor(logits))
print("answer probabilities:", dist.probs.data)

# %%
# Softmax weighting
# -----------------
# The second stage sees a probability-weighted blend of the answers.
blend = R.softmax_weight(dist, Tensor(reps)).data
print("\nsoftmax blend:", blend)
print("by hand:      ", dist.probs.data @ reps)

# %%
# Gumbel-softmax
# --------------
# Adding Gumbel noise and sharpening with a temperature gives a near one-hot
# sample that is still differentiable. High temperatures are smooth, low
# ones are almost a hard draw.
g = R.gumbel_sample(rng, (4,))
for tau in (5.0, 1.0, 0.1):
    print(f"tau={tau:<4} weights:", R.gumbel_softmax(dist, g, tau).data)

cfg = R.GumbelConfig()
print("annealed temperature by epoch:", [round(R.temperature_at(cfg, e), 3) for e in range(0, 13, 2)])

# %%
# Score function
# --------------
# Sample answers, and push the sampled losses into the log-probabilities.
# With only four answers the exact expectation is cheap, so we can see how
# noisy the sampled gradient is.


def logit_grad(make_loss):
    tape = Tape()
    x = tape.leaf(logits)
    d = R.AnswerDistribution.from_logits(x)
    loss = make_loss(d)
    return tape.grad(tape.backward(loss), x)


exact = logit_grad(lambda d: R.exact_expectation_loss(d, Tensor(per_answer_loss)))
print("\nexact gradient:      ", exact)

for baseline in (False, True):
    est = R.ScoreFunctionConfig(n_samples=16, baseline_subtract=baseline)
    draws = np.array([
        logit_grad(lambda d: R.score_function_loss(d, lambda i: Tensor(per_answer_loss[i]), est, rng))
        for _ in range(2000)
    ])
    label = "with baseline   " if baseline else "without baseline"
    print(f"sampled {label}: mean {draws.mean(axis=0)}  spread {draws.std(axis=0)}")

# Both means land on the exact gradient; the baseline shrinks the spread.

# %%
# Joint cross-entropy over pairs
# ------------------------------
# Skip the choice entirely: score all sixteen (answer, rationale) pairs and
# train one 16-way classifier. Pair (i, j) sits at index 4*i + j.
rationale_logits = rng.normal(size=(4, 4))
pair = R.joint_pair_logits(Tensor(logits), Tensor(rationale_logits))
best = int(pair.data.argmax())
print("\nbest pair index", best, "-> (answer, rationale) =", R.decode_pair(best))
print("loss if the gold pair is (0, 2):", R.joint_cross_entropy(pair, 0, 2).item())
print("uniform scores give ln 16 =", R.joint_cross_entropy(Tensor(np.zeros(16)), 0, 0).item())
