"""Round orchestration for FedAL and its FedMD / FedMD-LF ablations.

One round is a local-training stage (tau descent steps per client on its own
data) followed by a global-transfer stage (tau iterations on shared public
mini-batches). In every transfer iteration the clients upload logits, the
server takes a discriminator ascent step, and then sends each client the
all-client mean logit plus dU_n/df_n. The client finishes the chain rule
through its own network.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Partition, build_partition, load_idx, make_blobs
from .discriminator import Discriminator, disc_gradient, disc_step, grad_u_wrt_logits
from .errors import ConfigError
from .losses import (
    SnapshotPair,
    compose_global_loss,
    compose_local_loss,
    cross_entropy,
    kd_kl,
    leave_one_out_target,
)
from .metrics import MetricsRecord, accuracy, client_probs, mean_pairwise_kl, zeta_estimate
from .nn import ClientModel, ModelSpec, param_digest, tempered_softmax
from .optim import make_optimizer

log = logging.getLogger(__name__)

__all__ = [
    "ALGOS",
    "RunConfig",
    "CommLedger",
    "RoundState",
    "BatchStream",
    "comm_account",
    "make_partition",
    "init_state",
    "local_training_stage",
    "global_transfer_stage",
    "run_round",
    "evaluate",
    "run",
    "term_gradient_fns",
    "probe_variances",
]

ALGOS = ("FedAL", "FedMD", "FedMD-LF")
DEFAULT_CLIENT_HIDDEN = ([], [32], [64], [32, 32], [16])


@dataclass
class RunConfig:
    algo: str = "FedAL"
    clients: int = 10
    classes: int = 10
    rounds: int = 100
    tau: int = 5
    eta_l: float = 1e-3
    eta_d: float = 1e-4
    temp_kd: float = 1.0
    temp_disc: float = 2.0
    temp_lf: float = 1.0
    alpha: float = 2.0
    public_size: int = 1000
    batch: int = 32
    seed: int = 0
    optimizer: str = "sgd"
    disc_optimizer: str = "sgd"
    kd_target: str = "leave_one_out"
    client_hidden: list | None = None
    disc_hidden: list = field(default_factory=lambda: [32, 265])
    dataset: dict = field(default_factory=lambda: {
        "kind": "blobs", "dim": 20, "per_class": 400, "spread": 1.0, "center_scale": 1.0,
    })
    test_size: int = 1000
    parallel: int = 1
    probe_variance: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def use_lf(self) -> bool:
        return self.algo in ("FedAL", "FedMD-LF")

    @property
    def use_al(self) -> bool:
        return self.algo == "FedAL"

    def hidden_for(self, n: int) -> tuple:
        pool = self.client_hidden or DEFAULT_CLIENT_HIDDEN
        return tuple(pool[n % len(pool)])

    def validate(self) -> None:
        def need(ok, key, rng):
            if not ok:
                raise ConfigError(f"invalid {key}={getattr(self, key)!r}; accepted: {rng}")

        need(self.algo in ALGOS, "algo", "|".join(ALGOS))
        need(int(self.clients) >= 1, "clients", ">= 1")
        need(int(self.classes) >= 2, "classes", ">= 2")
        need(int(self.rounds) >= 1, "rounds", ">= 1")
        need(int(self.tau) >= 1, "tau", ">= 1")
        need(self.eta_l >= 0, "eta_l", ">= 0")
        need(self.eta_d >= 0, "eta_d", ">= 0")
        for k in ("temp_kd", "temp_disc", "temp_lf"):
            need(getattr(self, k) >= 1, k, ">= 1")
        need(self.alpha > 0, "alpha", "> 0")
        need(int(self.public_size) >= 0, "public_size", ">= 0")
        need(self.clients == 1 or self.public_size > 0, "public_size", "> 0 when clients >= 2")
        need(int(self.batch) >= 1, "batch", ">= 1")
        need(self.optimizer in ("sgd", "adam"), "optimizer", "sgd|adam")
        need(self.disc_optimizer in ("sgd", "adam"), "disc_optimizer", "sgd|adam")
        need(self.kd_target in ("leave_one_out", "all"), "kd_target", "leave_one_out|all")
        need(int(self.test_size) >= 1, "test_size", ">= 1")
        need(int(self.parallel) >= 1, "parallel", ">= 1")
        need(isinstance(self.dataset, dict) and self.dataset.get("kind") in ("blobs", "idx"),
             "dataset", "{'kind': 'blobs'|'idx', ...}")

    def to_dict(self) -> dict:
        return asdict(self)


def comm_account(K: int, batch_size: int, tau: int, algo: str) -> tuple[int, int]:
    """Per-client (upstream, downstream) scalar counts for one transfer stage.

    Up: logits on each public batch. Down: the mean logit, plus dU_n/df_n
    under FedAL.
    """
    up = tau * K * batch_size
    return up, (2 * up if algo == "FedAL" else up)


@dataclass
class CommLedger:
    N: int
    up_round: np.ndarray = None
    down_round: np.ndarray = None
    up_cum: np.ndarray = None
    down_cum: np.ndarray = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        z = lambda: np.zeros(self.N, dtype=np.int64)  # noqa: E731
        self.up_round, self.down_round, self.up_cum, self.down_cum = z(), z(), z(), z()

    def record(self, n: int, up: int, down: int) -> None:
        self.up_round[n] += up
        self.down_round[n] += down

    def close_round(self) -> tuple[list, list]:
        self.up_cum += self.up_round
        self.down_cum += self.down_round
        closed = (self.up_round.tolist(), self.down_round.tolist())
        self.history.append(closed)
        self.up_round[:] = 0
        self.down_round[:] = 0
        return closed


class BatchStream:
    """Endless epoch-shuffled index stream; every batch is full-sized."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._buf = np.empty(0, dtype=np.int64)

    def next(self, size: int) -> np.ndarray:
        size = min(size, self.n)
        while len(self._buf) < size:
            self._buf = np.concatenate([self._buf, self.rng.permutation(self.n)])
        out, self._buf = self._buf[:size], self._buf[size:]
        return out


@dataclass
class RoundState:
    config: RunConfig
    partition: Partition
    models: list
    snapshots: list
    optimizers: list
    local_streams: list
    public_stream: BatchStream | None
    disc: Discriminator | None
    ledger: CommLedger
    disc_opt: object = None
    t: int = 0
    instrument: bool = False
    events: list = field(default_factory=list)
    _pool: ThreadPoolExecutor | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.models)

    def map(self, fn, items):
        items = list(items)
        if self.config.parallel > 1 and len(items) > 1:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.config.parallel)
            return list(self._pool.map(fn, items))
        return [fn(i) for i in items]

    def log(self, *event):
        if self.instrument:
            self.events.append(event)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def make_partition(config: RunConfig) -> Partition:
    ds = dict(config.dataset)
    if ds["kind"] == "blobs":
        data = make_blobs(config.classes, int(ds.get("dim", 20)), int(ds.get("per_class", 400)),
                          float(ds.get("spread", 1.0)), config.seed,
                          center_scale=float(ds.get("center_scale", 1.0)))
        test = None
    else:
        data = load_idx(ds["images"], ds["labels"], config.classes)
        test = None
        if ds.get("test_images"):
            test = load_idx(ds["test_images"], ds["test_labels"], config.classes)
    return build_partition(data, config.clients, config.alpha, config.public_size,
                           config.test_size, config.seed, test=test)


def init_state(config: RunConfig, partition: Partition | None = None, instrument: bool = False) -> RoundState:
    if partition is None:
        partition = make_partition(config)
    N, K = config.clients, config.classes
    d = partition.test.inputs.shape[1]
    models, snaps, opts, streams = [], [], [], []
    for n in range(N):
        spec = ModelSpec(d, config.hidden_for(n), K)
        m = ClientModel.init(spec, np.random.default_rng([config.seed, 3, n]))
        models.append(m)
        # round-0 local anchor is the initialization
        snaps.append(SnapshotPair(m.params.copy(), None))
        opts.append(make_optimizer(config.optimizer, config.eta_l))
        streams.append(BatchStream(len(partition.client_sets[n]), np.random.default_rng([config.seed, 1, n])))
        if len(partition.client_sets[n]) == 0:
            log.warning("client %d has no local data; its local stages are skipped", n)
    disc = None
    if config.use_al and N >= 2:
        disc = Discriminator.init(K, N, np.random.default_rng([config.seed, 4]),
                                  hidden=config.disc_hidden, E_d=config.temp_disc)
    public_stream = None
    if len(partition.public):
        public_stream = BatchStream(len(partition.public), np.random.default_rng([config.seed, 2]))
    # plain ascent w + eta_d * grad unless an adaptive rule is requested
    disc_opt = make_optimizer("adam", config.eta_d) if config.disc_optimizer == "adam" else None
    return RoundState(config, partition, models, snaps, opts, streams, public_stream, disc,
                      CommLedger(N), disc_opt=disc_opt, instrument=instrument)


def local_training_stage(state: RoundState, n: int) -> ClientModel:
    """tau descent steps on cross-entropy (+ local LF) for client n, then refresh its post-local snapshot."""
    cfg = state.config
    model, snap = state.models[n], state.snapshots[n]
    data = state.partition.client_sets[n]
    if len(data):
        for i in range(cfg.tau):
            idx = state.local_streams[n].next(cfg.batch)
            batch = (data.inputs[idx], data.labels[idx])
            loss = compose_local_loss(model, batch, snap, cfg.temp_lf, use_lf=cfg.use_lf)
            grad = model.backward(loss.dlogits)
            model.params = state.optimizers[n].step(model.params, grad)
            state.log("local_step", state.t, i, n, param_digest(snap.theta_round_start))
    snap.theta_post_local = model.params.copy()
    state.log("local_end", state.t, n, param_digest(model.params))
    return model


def global_transfer_stage(state: RoundState) -> None:
    cfg = state.config
    N, K = state.N, cfg.classes
    if N < 2:
        # no peers to distill from and no one to be confused with
        return
    public = state.partition.public.inputs
    if len(public) == 0:
        raise ConfigError("global transfer needs a nonempty public set")
    for i in range(cfg.tau):
        idx = state.public_stream.next(cfg.batch)
        xb = public[idx]
        B = len(idx)
        for n in range(N):
            state.log("public_batch", state.t, i, n, tuple(idx.tolist()))
        # barrier 1: logits from every client
        logits = state.map(lambda n: state.models[n].forward(xb), range(N))
        for n in range(N):
            state.ledger.record(n, K * B, 0)

        ugrads = [None] * N
        if cfg.use_al:
            probs = np.concatenate([tempered_softmax(f, cfg.temp_disc) for f in logits])
            owners = np.repeat(np.arange(N), B)
            state.disc = disc_step(probs, owners, state.disc, cfg.eta_d, optimizer=state.disc_opt)
            state.log("disc_step", state.t, i, param_digest(state.disc.params))
            for n in range(N):
                ugrads[n] = grad_u_wrt_logits(logits[n], n, state.disc, cfg.temp_disc)
                state.log("grad_u", state.t, i, n, param_digest(state.disc.params))
        f_bar = np.mean(logits, axis=0)
        for n in range(N):
            state.ledger.record(n, 0, K * B * (2 if cfg.use_al else 1))

        # barrier 2: every client steps on its global objective
        def client_step(n):
            if cfg.kd_target == "all":
                target = tempered_softmax(f_bar, cfg.temp_kd)
            else:
                target = leave_one_out_target(f_bar, logits[n], N, cfg.temp_kd)
            model = state.models[n]
            grad = compose_global_loss(model, xb, target, ugrads[n], state.snapshots[n],
                                       E=cfg.temp_kd, use_lf=cfg.use_lf, E_lf=cfg.temp_lf)
            model.params = state.optimizers[n].step(model.params, grad)
            return n

        state.map(client_step, range(N))
        for n in range(N):
            state.log("global_step", state.t, i, n, param_digest(state.snapshots[n].theta_post_local))


def run_round(state: RoundState) -> tuple[list, list]:
    """One full round; returns the per-client (up, down) traffic of the round."""
    for n in range(state.N):
        state.snapshots[n].theta_round_start = state.models[n].params.copy()
        state.log("round_start", state.t, n, param_digest(state.models[n].params))
    state.map(lambda n: local_training_stage(state, n), range(state.N))
    global_transfer_stage(state)
    for n in range(state.N):
        state.log("global_end", state.t, n, param_digest(state.models[n].params))
    traffic = state.ledger.close_round()
    state.t += 1
    return traffic


def evaluate(state: RoundState, round_index: int | None = None) -> MetricsRecord:
    cfg = state.config
    acc = [accuracy(m, state.partition.test) for m in state.models]
    pub = state.partition.public.inputs
    if len(pub) and state.N >= 1:
        probs = client_probs(state.models, pub, cfg.temp_kd)
        kl = mean_pairwise_kl(probs)
        zeta = zeta_estimate(None, pub, probs=probs).tolist()
    else:
        kl, zeta = 0.0, [0.0] * state.N
    return MetricsRecord(
        round=state.t if round_index is None else round_index,
        algo=cfg.algo,
        seed=cfg.seed,
        acc=acc,
        mean_pairwise_kl=kl,
        zeta=zeta,
        up_cum=int(state.ledger.up_cum.sum()),
        down_cum=int(state.ledger.down_cum.sum()),
    )


def run(config: RunConfig, partition: Partition | None = None, on_record=None,
        state: RoundState | None = None) -> list[MetricsRecord]:
    """Run ``config.rounds`` rounds and return one record per round.

    ``on_record`` sees each record as soon as it exists, so a caller that
    writes there keeps everything computed before a failure. Pass ``state``
    (from :func:`init_state`) to keep hold of the final models.
    """
    if state is None:
        state = init_state(config, partition)
    records = []
    try:
        for _ in range(config.rounds):
            run_round(state)
            rec = evaluate(state)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    finally:
        state.close()
    return records


def term_gradient_fns(state: RoundState, n: int) -> dict:
    """Per-term gradient oracles for client n, for mini-batch noise probes.

    Maps term name to ``(grad_fn, n_samples)`` where ``grad_fn(idx)`` is the
    batch-mean gradient on rows ``idx``: ``l`` cross-entropy and ``rl`` local
    LF on D_n; ``k`` KD, ``u`` adversarial and ``rg`` global LF on P, all over
    theta_n; ``n`` the adversarial term over the discriminator weights.
    """
    cfg = state.config
    model = state.models[n].copy()
    snap = state.snapshots[n]
    data = state.partition.client_sets[n]
    pub = state.partition.public.inputs
    N = state.N
    all_logits = [m.copy().forward(pub) for m in state.models]
    f_bar = np.mean(all_logits, axis=0)
    if N >= 2:
        target = leave_one_out_target(f_bar, all_logits[n], N, cfg.temp_kd)
    else:
        target = tempered_softmax(all_logits[n], cfg.temp_kd)
    start = ClientModel(model.spec, snap.theta_round_start)
    post = ClientModel(model.spec, snap.theta_post_local)
    rl_target = tempered_softmax(start.forward(data.inputs), cfg.temp_lf)
    rg_target = tempered_softmax(post.forward(pub), cfg.temp_lf)

    def g_l(idx):
        f = model.forward(data.inputs[idx])
        return model.backward(cross_entropy(data.labels[idx], f).dlogits)

    def g_rl(idx):
        f = model.forward(data.inputs[idx])
        return model.backward(kd_kl(rl_target[idx], f, cfg.temp_lf).dlogits)

    def g_k(idx):
        f = model.forward(pub[idx])
        return model.backward(kd_kl(target[idx], f, cfg.temp_kd).dlogits)

    def g_rg(idx):
        f = model.forward(pub[idx])
        return model.backward(kd_kl(rg_target[idx], f, cfg.temp_lf).dlogits)

    fns = {"l": (g_l, len(data)), "rl": (g_rl, len(data)), "k": (g_k, len(pub)), "rg": (g_rg, len(pub))}
    disc = state.disc
    if disc is not None:
        disc_copy = disc.with_params(disc.params)

        def g_u(idx):
            f = model.forward(pub[idx])
            return model.backward(grad_u_wrt_logits(f, n, disc_copy, cfg.temp_disc))

        p_n = tempered_softmax(all_logits[n], cfg.temp_disc)

        def g_w(idx):
            return disc_gradient(p_n[idx], np.full(len(idx), n), disc_copy)

        fns["u"] = (g_u, len(pub))
        fns["n"] = (g_w, len(pub))
    return fns


def probe_variances(state: RoundState, n: int | None = None, batch_sizes=(8, 16, 32, 64),
                    n_batches: int = 200, seed: int = 0) -> dict:
    """Mini-batch gradient noise of every loss term, keyed by (term, batch size).

    Defaults to the client holding the most local data.
    """
    from .metrics import grad_variance_probe

    if n is None:
        n = int(np.argmax([len(d) for d in state.partition.client_sets]))
    out = {}
    for term, (fn, size) in term_gradient_fns(state, n).items():
        for b in batch_sizes:
            if b <= size:
                rng = np.random.default_rng([seed, b, len(out)])
                out[(term, b)] = grad_variance_probe(fn, size, b, n_batches, rng)
    return out
