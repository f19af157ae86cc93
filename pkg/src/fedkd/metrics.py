"""Evaluation metrics and the consensus / gradient-noise probes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError, ParameterError
from .losses import kl_rows
from .nn import ClientModel, tempered_softmax

__all__ = [
    "MetricsRecord",
    "accuracy",
    "class_prob_matrix",
    "client_probs",
    "zeta_estimate",
    "mean_pairwise_kl",
    "pinsker_slack",
    "grad_variance_probe",
]


@dataclass
class MetricsRecord:
    round: int
    algo: str
    seed: int
    acc: list
    mean_pairwise_kl: float
    zeta: list
    up_cum: int
    down_cum: int
    variance: dict = field(default_factory=dict)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.acc))


def accuracy(model: ClientModel, dataset) -> float:
    """Fraction of argmax hits; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise MetricError("accuracy of an empty dataset is undefined")
    pred = np.argmax(model.forward(dataset.inputs), axis=1)
    return float(np.mean(pred == dataset.labels))


def client_probs(models, inputs: np.ndarray, E: float = 1.0) -> np.ndarray:
    """Stacked (N, B, K) tempered output distributions."""
    return np.stack([tempered_softmax(m.forward(inputs), E) for m in models])


def class_prob_matrix(models, test, E: float = 1.0) -> np.ndarray:
    """Row c: mean over clients and over test samples of class c of p_n.

    Rows for classes with no test samples are NaN.
    """
    P = client_probs(models, test.inputs, E).mean(axis=0)
    K = P.shape[1]
    out = np.full((K, K), np.nan)
    for c in range(K):
        mask = test.labels == c
        if mask.any():
            out[c] = P[mask].mean(axis=0)
    return out


def zeta_estimate(models, public_inputs: np.ndarray, E: float = 1.0, probs: np.ndarray | None = None) -> np.ndarray:
    """Per-client mean over P of KL(p_n || mean_m p_m); the mean includes client n."""
    if probs is None:
        if len(public_inputs) == 0:
            raise MetricError("zeta needs a nonempty public set")
        probs = client_probs(models, public_inputs, E)
    avg = probs.mean(axis=0)
    return np.array([max(kl_rows(p, avg).mean(), 0.0) for p in probs])


def mean_pairwise_kl(probs: np.ndarray) -> float:
    """Mean over ordered client pairs n != m of mean_x KL(p_n || p_m)."""
    N = len(probs)
    if N < 2:
        return 0.0
    tot = 0.0
    for n in range(N):
        for m in range(N):
            if n != m:
                tot += kl_rows(probs[n], probs[m]).mean()
    return float(tot / (N * (N - 1)))


def pinsker_slack(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """sqrt(2 KL(p||q)) - ||p - q||_1 per row, KL in nats; nonnegative by Pinsker."""
    kl = np.maximum(kl_rows(p, q), 0.0)
    return np.sqrt(2.0 * kl) - np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def grad_variance_probe(grad_fn, n_samples: int, batch_size: int, n_batches: int,
                        rng: np.random.Generator) -> float:
    """Mean squared distance between mini-batch and full-data gradients.

    ``grad_fn(idx)`` must return the batch-mean gradient over the rows
    ``idx``. Mini-batches are drawn without replacement, so a batch equal to
    the whole dataset gives exactly zero.
    """
    if n_batches < 2:
        raise ParameterError("need at least two mini-batches")
    if not 1 <= batch_size <= n_samples:
        raise ParameterError(f"batch size {batch_size} outside [1, {n_samples}]")
    full = grad_fn(np.arange(n_samples))
    dev = np.empty(n_batches)
    for b in range(n_batches):
        idx = np.sort(rng.choice(n_samples, size=batch_size, replace=False))
        d = grad_fn(idx) - full
        dev[b] = d @ d
    return float(dev.mean())
