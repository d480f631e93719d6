"""
The experiment runner end to end
================================

Drives ``jointvcr`` through all four subcommands inside a scratch
directory: write a config, generate data, train, evaluate the checkpoint,
and run the loss-ratio ablation. Everything is tiny so it runs in seconds.
"""

import tempfile
from pathlib import Path

from jointvcr.cli import main

CONFIG = """\
[run]
seed = 7

[data]
n_train = 64
n_val = 32

[model]
embed_dim = 8
hidden_dim = 8

[train]
epochs = 3
batch_size = 16
lr = 0.005

[estimator]
variant = gumbel
tau_start = 3
"""

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    (root / "run.ini").write_text(CONFIG)
    cfg = str(root / "run.ini")

    print("$ jointvcr gen-data")
    main(["gen-data", "--config", cfg, "--out", str(root)])

    print("\n$ jointvcr train")
    main(["train", "--config", cfg, "--out", str(root)])
    print((root / "metrics.csv").read_text())

    print("$ jointvcr eval (as the joint 16-pair model would decode it)")
    main(["eval", "--checkpoint", str(root / "model.ckpt"), "--data", str(root / "val.jsonl"), "--variant", "joint_ce"])

    print("\n$ jointvcr ablate")
    main(["ablate", "--config", cfg, "--out", str(root)])

    print("\nartifacts:")
    for path in sorted(root.rglob("*")):
        if path.is_file():
            print(" ", path.relative_to(root))

    # A typo in the config is caught before any work starts.
    (root / "bad.ini").write_text("[train]\nlearnig_rate = 0.1\n")
    code = main(["train", "--config", str(root / "bad.ini"), "--out", str(root)])
    print("\nexit code for a misspelled key:", code)
