"""Federated knowledge distillation with an adversarial server discriminator.

Implements FedAL together with the FedMD and FedMD-LF baselines on small
NumPy MLPs.
"""
from .data import Dataset, Partition, PublicSet, build_partition, dirichlet_partition, draw_public, load_idx, make_blobs
from .discriminator import Discriminator
from .nn import ClientModel, ModelSpec, tempered_softmax
from .protocol import RunConfig, comm_account, init_state, run

__version__ = "0.1.0"
