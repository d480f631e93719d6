"""
Training the joint model against a separately trained baseline
==============================================================

Generates the synthetic task, trains one joint variant and the conditioned
baseline from the same seed, and prints the three accuracies per epoch.

The defaults here are scaled down so the script finishes in about a minute.
Pass ``--full`` for the reference setting (2000/2000 items, 20 epochs; a few
minutes per run on one core).
"""

import argparse
import time

from jointvcr import data as D
from jointvcr import relax as R
from jointvcr.model import ModelConfig
from jointvcr.train import TrainConfig, train_run

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--variant", default="gumbel", choices=sorted(R.VARIANTS))
args = parser.parse_args()

if args.full:
    spec, train_cfg = D.GenSpec(noise_prob=0.0), TrainConfig()
else:
    # a larger step size makes up for the shorter schedule
    spec, train_cfg = D.GenSpec(n_train=600, n_val=300, noise_prob=0.0), TrainConfig(epochs=6, lr=2e-3)

train, val = D.generate(spec)
print(f"{len(train)} train / {len(val)} val items")

# One item, decoded by the planted-rule oracle.
item = val[0]
print("question tokens:", item.question)
print("answers:", item.answers, "gold", item.answer_label, "oracle", D.oracle_answer(item))
print("rationales:", item.rationales, "gold", item.rationale_label,
      "oracle", D.oracle_rationale(item, item.answer_label))


def show(row):
    print(f"  epoch {row.epoch:2d}  Q->A {row.q_a_acc:.3f}  QA->R {row.qa_r_acc:.3f}  "
          f"Q->AR {row.q_ar_acc:.3f}  lr {row.lr_current:.1e}")


est = R.VARIANTS[args.variant]()
results = {}
for name, cfg in ((args.variant, train_cfg),
                  ("conditioned baseline", TrainConfig(**{**train_cfg.__dict__, "baseline_mode": "conditioned"}))):
    print(f"\n{name}")
    t0 = time.time()
    res = train_run(ModelConfig(), est, cfg, train, val, on_epoch=show)
    results[name] = res.rows[-1]
    print(f"  ({time.time() - t0:.0f}s)")

print("\nfinal Q->AR:", {k: round(v.q_ar_acc, 4) for k, v in results.items()})
