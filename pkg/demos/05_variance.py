"""Mini-batch gradient noise of each loss term after a short training run.

Each term's variance should roughly halve every time the batch doubles.
Terms: l cross-entropy, rl local LF, k distillation, u adversarial (client
side), rg global LF, n adversarial (discriminator side).
"""
# %%
from fedkd import RunConfig, init_state, run
from fedkd.protocol import probe_variances

cfg = RunConfig(algo="FedAL", clients=10, alpha=0.5, public_size=1000, rounds=20, eta_l=0.1, eta_d=0.1,
                test_size=500, dataset={"kind": "blobs", "dim": 20, "per_class": 400, "spread": 1.5})
state = init_state(cfg)
run(cfg, state=state)

# %%
sizes = (8, 16, 32, 64)
table = probe_variances(state, batch_sizes=sizes)
for term in sorted({t for t, _ in table}):
    v = [table[(term, b)] for b in sizes]
    print(f"{term:3s}", "  ".join(f"{x:.3e}" for x in v), " ratios", [round(a / b, 2) for a, b in zip(v, v[1:])])
