"""Client-side loss terms with their logit-space gradients.

Every term returns a :class:`LossValueAndGrad` whose ``value`` is a batch mean
and whose ``dlogits`` is the gradient of that mean, so it already contains the
1/B factor and can be handed straight to :meth:`ClientModel.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ProtocolError, ShapeError, StateError
from .nn import ClientModel, log_tempered_softmax, tempered_softmax

__all__ = [
    "LossValueAndGrad",
    "SnapshotPair",
    "cross_entropy",
    "kl_rows",
    "kd_kl",
    "lf_local",
    "lf_global",
    "leave_one_out_target",
    "compose_local_loss",
    "compose_global_loss",
]

STOCHASTIC_TOL = 1e-9


@dataclass
class LossValueAndGrad:
    value: float
    dlogits: np.ndarray

    def __add__(self, other: "LossValueAndGrad") -> "LossValueAndGrad":
        return LossValueAndGrad(self.value + other.value, self.dlogits + other.dlogits)


@dataclass
class SnapshotPair:
    """theta at the start of the round and theta after the local stage."""

    theta_round_start: np.ndarray | None = None
    theta_post_local: np.ndarray | None = None


def cross_entropy(labels: np.ndarray, logits: np.ndarray) -> LossValueAndGrad:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise ParameterError("label out of range")
    logp = log_tempered_softmax(logits, 1.0)
    rows = np.arange(B)
    value = -logp[rows, labels].mean()
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return LossValueAndGrad(float(value), d / B)


def kl_rows(p: np.ndarray, q: np.ndarray, log_q: np.ndarray | None = None) -> np.ndarray:
    """Per-row KL(p || q) in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if log_q is None:
        log_q = np.log(np.maximum(q, np.finfo(float).tiny))
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * (np.log(safe) - log_q), 0.0).sum(axis=-1)


def _check_stochastic(target: np.ndarray):
    if np.any(target < -STOCHASTIC_TOL) or np.any(np.abs(target.sum(axis=-1) - 1.0) > STOCHASTIC_TOL):
        raise ParameterError("target rows must be probability vectors")


def kd_kl(target: np.ndarray, logits: np.ndarray, E: float = 1.0) -> LossValueAndGrad:
    """Mean KL(target || softmax(logits / E)); gradient (p - target) / (E B)."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target {target.shape} vs logits {logits.shape}")
    _check_stochastic(target)
    B = logits.shape[0]
    logp = log_tempered_softmax(logits, E)
    value = kl_rows(target, None, log_q=logp).mean() if B else 0.0
    return LossValueAndGrad(float(value), (np.exp(logp) - target) / (E * max(B, 1)))


def _anchor_loss(model: ClientModel, anchor: np.ndarray, inputs, E, logits):
    if logits is None:
        logits = model.forward(inputs)
    anchor_logits = ClientModel(model.spec, anchor).forward(inputs)
    return kd_kl(tempered_softmax(anchor_logits, E), logits, E)


def lf_local(model: ClientModel, snapshot: SnapshotPair, inputs, E: float = 1.0,
             logits: np.ndarray | None = None) -> LossValueAndGrad:
    """Less-forgetting term anchored at the round-start parameters.

    Pass ``logits`` when ``model.forward(inputs)`` was already evaluated.
    """
    if snapshot.theta_round_start is None:
        raise StateError("round-start snapshot is not set")
    return _anchor_loss(model, snapshot.theta_round_start, inputs, E, logits)


def lf_global(model: ClientModel, snapshot: SnapshotPair, inputs, E: float = 1.0,
              logits: np.ndarray | None = None) -> LossValueAndGrad:
    """Less-forgetting term anchored at the post-local-stage parameters."""
    if snapshot.theta_post_local is None:
        raise StateError("post-local snapshot is not set")
    return _anchor_loss(model, snapshot.theta_post_local, inputs, E, logits)


def leave_one_out_target(f_bar_all: np.ndarray, f_self: np.ndarray, N: int, E: float = 1.0) -> np.ndarray:
    """Tempered softmax of the peers-only mean logit, recovered from the all-client mean."""
    if N < 2:
        raise ParameterError("leave-one-out target needs at least two clients")
    f_bar_all = np.asarray(f_bar_all, dtype=np.float64)
    f_self = np.asarray(f_self, dtype=np.float64)
    if f_bar_all.shape != f_self.shape:
        raise ShapeError(f"{f_bar_all.shape} vs {f_self.shape}")
    return tempered_softmax((N * f_bar_all - f_self) / (N - 1), E)


def compose_local_loss(model: ClientModel, batch, snapshot: SnapshotPair | None,
                       E: float = 1.0, use_lf: bool = True) -> LossValueAndGrad:
    """Cross-entropy on a labeled batch plus, when ``use_lf``, the local LF term.

    ``batch`` is an (inputs, labels) pair. The model's forward cache is left
    on ``inputs`` so the caller can backpropagate the returned ``dlogits``.
    """
    inputs, labels = batch
    if use_lf and snapshot is not None:
        # anchor forward first: the model's own forward must be the cached one
        anchor = ClientModel(model.spec, _require(snapshot.theta_round_start, "round-start"))
        target = tempered_softmax(anchor.forward(inputs), E)
        logits = model.forward(inputs)
        return cross_entropy(labels, logits) + kd_kl(target, logits, E)
    logits = model.forward(inputs)
    return cross_entropy(labels, logits)


def _require(x, name):
    if x is None:
        raise StateError(f"{name} snapshot is not set")
    return x


def compose_global_loss(model: ClientModel, public_batch: np.ndarray, target: np.ndarray | None,
                        u_grad_from_server: np.ndarray | None, snapshot: SnapshotPair | None,
                        E: float = 1.0, use_lf: bool = True, E_lf: float | None = None,
                        return_loss: bool = False):
    """Parameter gradient of KD + adversarial + global LF on a public batch.

    ``target`` is the distillation distribution (None skips the KD term, as
    with a single client). ``u_grad_from_server`` is dU_n/df_n; it enters with
    a positive sign since U_n is added to the client objective. Returns the
    flat gradient, or (gradient, LossValueAndGrad) with ``return_loss``; the
    loss value there excludes U_n, which only the server can evaluate.
    """
    E_lf = E if E_lf is None else E_lf
    anchor_p = None
    if use_lf and snapshot is not None:
        anchor = ClientModel(model.spec, _require(snapshot.theta_post_local, "post-local"))
        anchor_p = tempered_softmax(anchor.forward(public_batch), E_lf)
    logits = model.forward(public_batch)
    total = LossValueAndGrad(0.0, np.zeros_like(logits))
    if target is not None:
        total = total + kd_kl(target, logits, E)
    if u_grad_from_server is not None:
        u = np.asarray(u_grad_from_server, dtype=np.float64)
        if u.shape != logits.shape:
            raise ProtocolError(f"server gradient shape {u.shape} does not match logits {logits.shape}")
        total = LossValueAndGrad(total.value, total.dlogits + u)
    if anchor_p is not None:
        total = total + kd_kl(anchor_p, logits, E_lf)
    grad = model.backward(total.dlogits)
    return (grad, total) if return_loss else grad
