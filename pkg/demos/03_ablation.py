"""FedMD, FedMD-LF and FedAL side by side on a small blob problem.

All three share one configuration. Prints final accuracy, client disagreement
and the scalar traffic each algorithm spent.
"""
# %%
import numpy as np

from fedkd import RunConfig, run

base = dict(clients=10, classes=10, alpha=0.5, public_size=500, rounds=60, test_size=1000,
            optimizer="sgd", eta_l=0.1, eta_d=0.1, temp_disc=1.0, tau=10,
            dataset={"kind": "blobs", "dim": 20, "per_class": 200, "spread": 1.5})

# %%
for algo in ("FedMD", "FedMD-LF", "FedAL"):
    recs = [run(RunConfig(algo=algo, seed=s, **base)) for s in (0, 1)]
    acc = np.mean([r[-1].mean_acc for r in recs])
    kl = np.mean([r[-1].mean_pairwise_kl for r in recs])
    last = recs[0][-1]
    print(f"{algo:9s} acc {acc:.4f}  pairwise KL {kl:.4f}  up {last.up_cum:>9d}  down {last.down_cum:>9d}")
