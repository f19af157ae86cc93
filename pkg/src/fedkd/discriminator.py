"""Server-side discriminator: which client produced this output distribution?

The discriminator is an MLP from the K-simplex to N client logits. Its input
is a client's logits passed through a softmax at temperature ``E_d``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .nn import ClientModel, ModelSpec, log_tempered_softmax, softmax_vjp, tempered_softmax

__all__ = [
    "Discriminator",
    "disc_forward",
    "adversarial_loss",
    "disc_objective",
    "disc_gradient",
    "disc_step",
    "grad_u_wrt_logits",
    "best_response_reference",
]

DEFAULT_HIDDEN = (32, 265)


@dataclass
class Discriminator:
    net: ClientModel
    E_d: float = 2.0

    @classmethod
    def init(cls, K: int, N: int, rng: np.random.Generator, hidden=DEFAULT_HIDDEN, E_d: float = 2.0):
        return cls(ClientModel.init(ModelSpec(K, tuple(hidden), N), rng), E_d)

    @property
    def K(self) -> int:
        return self.net.spec.input_dim

    @property
    def N(self) -> int:
        return self.net.spec.num_classes

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def with_params(self, params) -> "Discriminator":
        return Discriminator(self.net.with_params(params), self.E_d)


def disc_forward(p: np.ndarray, disc: Discriminator) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != disc.K:
        raise ShapeError(f"discriminator expects (B, {disc.K}) inputs, got {p.shape}")
    return disc.net.forward(p)


def adversarial_loss(n: int, disc_logits: np.ndarray) -> float:
    """U_n: batch-mean log-probability that the discriminator assigns to client n."""
    disc_logits = np.asarray(disc_logits, dtype=np.float64)
    if not 0 <= n < disc_logits.shape[1]:
        raise ParameterError(f"client index {n} out of range for N={disc_logits.shape[1]}")
    return float(log_tempered_softmax(disc_logits)[:, n].mean())


def disc_objective(probs: np.ndarray, clients: np.ndarray, disc: Discriminator) -> float:
    """Mean over rows of log h(p)[client]; equals (1/N) sum_n U_n for equal-size client blocks."""
    clients = np.asarray(clients, dtype=np.int64)
    if len(clients) == 0:
        return 0.0
    logp = log_tempered_softmax(disc_forward(probs, disc))
    return float(logp[np.arange(len(clients)), clients].mean())


def disc_gradient(probs: np.ndarray, clients: np.ndarray, disc: Discriminator) -> np.ndarray:
    """Gradient over w of :func:`disc_objective` (the ascent direction)."""
    clients = np.asarray(clients, dtype=np.int64)
    M = len(clients)
    h = tempered_softmax(disc_forward(probs, disc))
    up = -h
    up[np.arange(M), clients] += 1.0
    return disc.net.backward(up / M)


def disc_step(probs: np.ndarray, clients: np.ndarray, disc: Discriminator, eta_d: float,
              optimizer=None) -> Discriminator:
    """One ascent step on the discriminator objective; returns a new Discriminator.

    ``optimizer`` (anything with ``step(params, grad) -> params`` doing
    descent) replaces the plain ``w + eta_d * grad`` rule when given.
    """
    if eta_d < 0:
        raise ParameterError("eta_d must be nonnegative")
    if len(clients) == 0:
        return disc
    g = disc_gradient(probs, clients, disc)
    if optimizer is not None:
        return disc.with_params(optimizer.step(disc.params, -g))
    return disc.with_params(disc.params + eta_d * g)


def grad_u_wrt_logits(f_n: np.ndarray, n: int, disc: Discriminator, E_d: float | None = None,
                      return_value: bool = False):
    """dU_n/df_n: backprop through the discriminator and the tempered softmax.

    This is the per-client downlink payload of the transfer stage.
    """
    E_d = disc.E_d if E_d is None else E_d
    f_n = np.asarray(f_n, dtype=np.float64)
    B = f_n.shape[0]
    p = tempered_softmax(f_n, E_d)
    logits = disc_forward(p, disc)
    h = tempered_softmax(logits)
    up = -h
    up[:, n] += 1.0
    _, dp = disc.net.backward(up / B, return_input_grad=True)
    g = softmax_vjp(p, dp, E_d)
    if return_value:
        return g, adversarial_loss(n, logits)
    return g


def best_response_reference(client_probs, eps: float = 1e-12) -> np.ndarray:
    """Elementwise p_n / sum_m p_m for stacked client distributions (N, ..., K)."""
    P = np.asarray(client_probs, dtype=np.float64)
    return P / np.maximum(P.sum(axis=0, keepdims=True), eps)
