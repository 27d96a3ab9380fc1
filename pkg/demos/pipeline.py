"""End-to-end run on the toy CNN: train, prune, compile, execute and compare.

Run with ``python demos/pipeline.py``. Takes under a minute on one core.
"""
import numpy as np

from patconv import (PruneConfig, compile_model, compression_stats, emit_plan_text,
                     reference_network, relative_error, run_network)
from patconv.admm import evaluate, make_synthetic_dataset, prune_model, toy_cnn, train_dense

data = make_synthetic_dataset(n_train=1000, n_val=500, seed=1)
dense = train_dense(toy_cnn(seed=0), data, epochs=4, lr=0.01)
print(f"dense accuracy {evaluate(dense, data):.3f}")

config = PruneConfig(pattern_count=4, keep_ratio=0.5, layer_keep_ratios={"conv1": 1.0},
                     method="admm", rounds=2, epochs_per_round=1, finetune_epochs=1)
pruned = prune_model(dense, config, data)
print(f"pruned accuracy {evaluate(pruned, data):.3f}")
print(compression_stats(pruned).summary())

plans = compile_model(pruned, threads=2)
print(emit_plan_text(plans[-1]).splitlines()[0])

x = data.x_val[:8]
y = run_network(pruned, plans, x)
print(f"relative error vs reference {relative_error(y, reference_network(pruned, x)):.2e}")
print("predictions", np.argmax(y, axis=1), "labels", data.y_val[:8])
