"""Transfer stage only: two linear heads pulled toward agreement.

No local training happens here. The distillation term and the adversarial
term both push the two output distributions together on the public set.
"""
# %%
from fedkd import RunConfig, init_state
from fedkd.metrics import client_probs, mean_pairwise_kl
from fedkd.protocol import global_transfer_stage

cfg = RunConfig(algo="FedAL", clients=2, classes=5, tau=5, eta_l=0.05, eta_d=0.05, public_size=200,
                test_size=100, seed=3, client_hidden=[[], []],
                dataset={"kind": "blobs", "dim": 20, "per_class": 100})
state = init_state(cfg)
pub = state.partition.public.inputs

# %%
for t in range(201):
    if t % 25 == 0:
        print(f"round {t:3d}: pairwise KL {mean_pairwise_kl(client_probs(state.models, pub)):.5f}")
    for s, m in zip(state.snapshots, state.models):
        s.theta_post_local = m.params.copy()
    global_transfer_stage(state)
    state.ledger.close_round()
