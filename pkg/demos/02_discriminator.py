"""The server discriminator against its closed-form best response.

Three frozen "clients" are fixed distributions over 4 classes. The optimal
discriminator posterior for client n at p is p_n / sum_m p_m, so a well-trained
network should track that ratio on the classes it sees.
"""
# %%
import numpy as np

from fedkd.discriminator import Discriminator, best_response_reference, disc_forward, disc_step
from fedkd.nn import tempered_softmax
from fedkd.optim import Adam

rng = np.random.default_rng(0)
K, N = 4, 3
client_dists = rng.dirichlet(np.ones(K), N)  # each client emits one-hot classes with these rates
onehots = np.eye(K)

# %% Train on one-hot inputs sampled from each client's class distribution.
disc = Discriminator.init(K, N, rng, hidden=(32, 32))
opt = Adam(1e-2)
for step in range(1500):
    labels = np.stack([rng.choice(K, 64, p=q) for q in client_dists])
    probs = onehots[labels.ravel()]
    disc = disc_step(probs, np.repeat(np.arange(N), 64), disc, eta_d=0.0, optimizer=opt)

# %% Compare the learned posterior h(e_k) with q_n[k] / sum_m q_m[k].
learned = tempered_softmax(disc_forward(onehots, disc))
oracle = best_response_reference(client_dists).T
print("learned\n", learned.round(3))
print("best response\n", oracle.round(3))
print("max abs gap", np.abs(learned - oracle).max().round(4))
