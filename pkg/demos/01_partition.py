"""How skewed are the clients? Dirichlet label partitions at three concentrations."""
# %%
import numpy as np

from fedkd import build_partition, make_blobs
from fedkd.data import label_entropy

K, N = 10, 10
data = make_blobs(K, 20, 300, spread=1.5, seed=0)

# %% Smaller alpha pushes every client toward a handful of classes.
for alpha in (0.1, 0.5, 100.0):
    part = build_partition(data, N, alpha, public_size=500, test_size=500, seed=0)
    ent = [label_entropy(c.labels, K) for c in part.client_sets]
    sizes = [len(c) for c in part.client_sets]
    print(f"alpha={alpha:>6}: mean label entropy {np.mean(ent):.3f} nats (max {np.log(K):.3f}), sizes {sizes}")

# %% Class histogram of each client at alpha=0.5
part = build_partition(data, N, 0.5, public_size=500, test_size=500, seed=0)
for n, c in enumerate(part.client_sets):
    print(n, np.bincount(c.labels, minlength=K))
