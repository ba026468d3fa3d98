"""Client training, server aggregation and the central/local/federated loops."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .errors import TrainingError
from .metrics import MetricsConfig, confusion, f_beta, fairness_entropy
from .nn import (
    EVAL,
    TRAIN,
    AdamConfig,
    AdamState,
    ModelParams,
    adam_step,
    backward,
    forward,
    softmax,
    weighted_cross_entropy,
)
from .rng import derive_rng

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox", "qfedavg", "fedyogi")
QFFL_EPS = 1e-10


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    dropout: float = 0.2
    # None: inverse class frequency of the shard being trained, scaled to mean 1
    class_weights: tuple[float, float] | None = None
    adam: AdamConfig = field(default_factory=AdamConfig)

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not 0 <= self.dropout < 1:
            raise TrainingError("dropout must lie in [0, 1)")
        if self.class_weights is not None:
            cw = self.class_weights
            if len(cw) != 2 or min(cw) < 0 or max(cw) == 0:
                raise TrainingError(f"class_weights must be two non-negative numbers, not both 0: {cw}")
        a = self.adam
        if not (0 < a.beta1 < 1 and 0 < a.beta2 < 1 and a.epsilon > 0):
            raise TrainingError("ADAM constants out of range")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "fedavg"
    mu: float = 0.0
    q: float = 0.0
    eta_g: float = 0.1
    tau: float = 1e-3
    server_beta1: float = 0.9
    server_beta2: float = 0.99
    # None: 1 / client learning rate
    lipschitz: float | None = None

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise TrainingError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy == "fedprox" and self.mu < 0:
            raise TrainingError("mu must be >= 0")
        if self.strategy == "qfedavg":
            if self.q < 0:
                raise TrainingError("q must be >= 0")
            if self.lipschitz is not None and not self.lipschitz > 0:
                raise TrainingError("lipschitz must be positive")
        if self.strategy == "fedyogi":
            if not (self.eta_g > 0 and self.tau > 0):
                raise TrainingError("eta_g and tau must be positive")
            if not (0 < self.server_beta1 < 1 and 0 < self.server_beta2 < 1):
                raise TrainingError("server betas must lie in (0, 1)")


@dataclass(frozen=True)
class FedRunConfig:
    num_clients: int = 5
    local_epochs: int = 1
    global_rounds: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.local_epochs < 1 or self.global_rounds < 1:
            raise TrainingError("local_epochs and global_rounds must be >= 1")
        self.train.validate()
        self.strategy.validate()
        self.metrics.validate()


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams
    n_k: int
    loss_at_global: float
    local_train_loss: float


@dataclass
class ServerOptState:
    m: np.ndarray
    v: np.ndarray
    round: int = 0

    @classmethod
    def init(cls, dim: int, tau: float) -> ServerOptState:
        return cls(np.zeros(dim), np.full(dim, tau * tau), 0)


# ---------------------------------------------------------------- client side


def auto_class_weights(labels: np.ndarray) -> tuple[float, float]:
    """Inverse class frequency, scaled so the two weights average to 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=2).astype(float)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    inv *= 2.0 / inv.sum()
    return float(inv[0]), float(inv[1])


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, x, EVAL)
    return softmax(logits)[:, 1]


def dataset_loss(params: ModelParams, ds: Dataset, class_weights) -> float:
    logits, _ = forward(params, ds.features, EVAL)
    w = np.asarray(class_weights, dtype=float)[ds.labels]
    if w.sum() == 0:
        return 0.0
    return weighted_cross_entropy(logits, ds.labels, class_weights)[0]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing single row cannot be batch-normalised; fold it into the previous batch
    if len(out) > 1 and out[-1].size == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def train_epochs(
    params: ModelParams,
    shard: Dataset,
    cfg: TrainConfig,
    epochs: int,
    rng: np.random.Generator,
    state: AdamState | None = None,
    class_weights: tuple[float, float] | None = None,
    anchor: ModelParams | None = None,
    prox_mu: float = 0.0,
) -> tuple[ModelParams, AdamState]:
    """Mini-batch ADAM on weighted CE; with ``prox_mu > 0`` adds ``mu * (w - anchor)`` to every gradient."""
    cw = class_weights or cfg.class_weights or auto_class_weights(shard.labels)
    state = state or AdamState.zeros_like(params)
    anchor_arrays = anchor.trainable() if anchor is not None and prox_mu > 0 else None
    x, y = shard.features, shard.labels
    for _ in range(epochs):
        for idx in _batches(len(shard), cfg.batch_size, rng):
            if idx.size < 2 and params.batch_norm:
                continue
            xb, yb = x[idx], y[idx]
            if np.asarray(cw)[yb].sum() == 0:
                continue
            _, cache = forward(params, xb, TRAIN, rng=rng, dropout=cfg.dropout)
            grads = backward(params, cache, yb, cw)
            if anchor_arrays is not None:
                grads.arrays = [g + prox_mu * (w - a)
                                for g, w, a in zip(grads.arrays, params.trainable(), anchor_arrays)]
            params, state = adam_step(state, params, grads, cfg.learning_rate, cfg.adam)
            if params.batch_norm:
                params = params.with_arrays(params.trainable(),
                                            [*cache.new_running_mean, *cache.new_running_var])
    return params, state


def local_train(
    shard: Dataset,
    global_params: ModelParams,
    cfg: TrainConfig,
    epochs: int,
    prox_mu: float,
    rng: np.random.Generator,
    client_id: int = 0,
) -> ClientUpdate:
    """One client's round: ``epochs`` passes of ADAM (fresh state) from the global model."""
    if len(shard) == 0:
        raise TrainingError(f"client {client_id} has an empty shard")
    if epochs < 0:
        raise TrainingError("epochs must be >= 0")
    cw = cfg.class_weights or auto_class_weights(shard.labels)
    loss_at_global = dataset_loss(global_params, shard, cw)
    if epochs == 0:
        return ClientUpdate(client_id, global_params, len(shard), loss_at_global, loss_at_global)
    params, _ = train_epochs(global_params, shard, cfg, epochs, rng, None, cw,
                             anchor=global_params, prox_mu=prox_mu)
    return ClientUpdate(client_id, params, len(shard), loss_at_global, dataset_loss(params, shard, cw))


# ---------------------------------------------------------------- server side


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise TrainingError("no client updates to aggregate")
    # sorting by id makes every aggregate independent of arrival order, bit for bit
    ups = sorted(updates, key=lambda u: u.client_id)
    ref = ups[0].params
    for u in ups[1:]:
        if u.params.layer_sizes != ref.layer_sizes or u.params.batch_norm != ref.batch_norm:
            raise TrainingError("client models have mismatched shapes")
    return ups


def _weighted_mean(arrays_per_client: list[list[np.ndarray]], weights: np.ndarray) -> list[np.ndarray]:
    out = [np.zeros_like(a) for a in arrays_per_client[0]]
    for arrs, w in zip(arrays_per_client, weights):
        for o, a in zip(out, arrs):
            o += w * a
    return out


def _sample_weights(ups: list[ClientUpdate]) -> np.ndarray:
    n = np.array([u.n_k for u in ups], dtype=float)
    if np.any(n < 1):
        raise TrainingError("every client update needs n_k >= 1")
    return n / n.sum()


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Sample-count weighted average of every array, batch-norm statistics included."""
    ups = _ordered(updates)
    w = _sample_weights(ups)
    ref = ups[0].params
    n_train = len(ref.trainable())
    merged = _weighted_mean([u.params.arrays() for u in ups], w)
    return ref.with_arrays(merged[:n_train], merged[n_train:])


def _average_buffers(ups: list[ClientUpdate]) -> list[np.ndarray]:
    return _weighted_mean([u.params.buffers() for u in ups], _sample_weights(ups))


def aggregate_qfedavg(global_params: ModelParams, updates: Sequence[ClientUpdate], q: float,
                      lipschitz: float, eps: float = QFFL_EPS) -> ModelParams:
    """q-fair aggregation: clients with higher loss at the global model get larger steps.

    With ``delta_k = L (w - w_k)`` and ``F_k`` the client loss of the incoming
    global model,
    ``w' = w - sum_k F_k^q delta_k / sum_k (q F_k^(q-1) |delta_k|^2 + L F_k^q)``.
    Batch-norm statistics are sample-count averaged.
    """
    ups = _ordered(updates)
    if not lipschitz > 0:
        raise TrainingError("lipschitz constant must be positive")
    wg = global_params.flatten(trainable_only=True)
    num = np.zeros_like(wg)
    denom = 0.0
    for u in ups:
        f = max(u.loss_at_global, 0.0) + eps
        delta = lipschitz * (wg - u.params.flatten(trainable_only=True))
        num += f**q * delta
        denom += q * f ** (q - 1) * float(delta @ delta) + lipschitz * f**q
    new = global_params.unflatten(wg - num / denom, trainable_only=True)
    return new.with_arrays(new.trainable(), _average_buffers(ups))


def aggregate_fedyogi(global_params: ModelParams, updates: Sequence[ClientUpdate], state: ServerOptState,
                      eta_g: float, tau: float, betas: tuple[float, float] = (0.9, 0.99)
                      ) -> tuple[ModelParams, ServerOptState]:
    """Yogi server step on the sample-weighted mean client delta."""
    ups = _ordered(updates)
    b1, b2 = betas
    wg = global_params.flatten(trainable_only=True)
    if state.m.shape != wg.shape or state.v.shape != wg.shape:
        raise TrainingError("server optimizer state does not match the model")
    w = _sample_weights(ups)
    delta = np.zeros_like(wg)
    for u, wk in zip(ups, w):
        delta += wk * (u.params.flatten(trainable_only=True) - wg)
    d2 = delta * delta
    m = b1 * state.m + (1 - b1) * delta
    v = state.v - (1 - b2) * d2 * np.sign(state.v - d2)
    new = global_params.unflatten(wg + eta_g * m / (np.sqrt(v) + tau), trainable_only=True)
    new = new.with_arrays(new.trainable(), _average_buffers(ups))
    return new, ServerOptState(m, v, state.round + 1)


# ---------------------------------------------------------------- evaluation


def evaluate(params: ModelParams, ds: Dataset, metrics: MetricsConfig) -> tuple[float, dict]:
    probs = predict_proba(params, ds.features)
    cm = confusion(probs, ds.labels, metrics.threshold)
    return f_beta(cm, metrics.beta), asdict(cm)


def _slice_scores(params: ModelParams, ds: Dataset, slices: Sequence[np.ndarray] | None,
                  metrics: MetricsConfig) -> list[float | None]:
    if not slices:
        return []
    out: list[float | None] = []
    for idx in slices:
        out.append(None if len(idx) == 0 else evaluate(params, ds.subset(idx), metrics)[0])
    return out


def _fairness(scores: Sequence[float | None]) -> float | None:
    vals = [s for s in scores if s is not None]
    return fairness_entropy(vals) if vals else None


# ---------------------------------------------------------------- run loops


@dataclass
class FedData:
    """Everything a run needs: client shards plus pooled and client-routed held-out sets."""

    shards: list[Dataset]
    val: Dataset
    test: Dataset
    val_slices: list[np.ndarray] | None = None
    test_slices: list[np.ndarray] | None = None


@dataclass
class RunHistory:
    mode: str
    rounds: list[dict]
    best_round: int
    final_test_metrics: dict
    config_echo: dict = field(default_factory=dict)
    per_client: list[dict] | None = None

    def to_json(self) -> dict:
        out = {"config_echo": self.config_echo, "mode": self.mode, "rounds": self.rounds,
               "best_round": self.best_round, "final_test_metrics": self.final_test_metrics}
        if self.per_client is not None:
            out["per_client"] = self.per_client
        return out


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _strategy_mu(strategy: StrategyConfig) -> float:
    return strategy.mu if strategy.strategy == "fedprox" else 0.0


def run_federated(data: FedData, cfg: FedRunConfig, init: ModelParams, jobs: int = 1) -> RunHistory:
    """R global rounds of E local epochs on every client followed by server aggregation.

    Each client draws from its own stream keyed by ``(seed, client, round)``,
    so the trajectory does not depend on ``jobs``.  The reported model is the
    round with the best pooled validation F-beta.
    """
    cfg.validate()
    if any(len(s) == 0 for s in data.shards):
        raise TrainingError("a client shard is empty")
    strat = cfg.strategy
    mu = _strategy_mu(strat)
    lipschitz = strat.lipschitz or 1.0 / cfg.train.learning_rate
    global_params = init
    yogi = ServerOptState.init(global_params.flatten(trainable_only=True).size, strat.tau)
    rounds: list[dict] = []
    best_round, best_score, best_params = 0, -1.0, init

    for r in range(1, cfg.global_rounds + 1):
        current = global_params

        def client_job(k: int) -> ClientUpdate:
            rng = derive_rng(cfg.seed, "client", k, "round", r)
            return local_train(data.shards[k], current, cfg.train, cfg.local_epochs, mu, rng, client_id=k)

        updates = _map(client_job, list(range(len(data.shards))), jobs)
        if strat.strategy in ("fedavg", "fedprox"):
            global_params = aggregate_fedavg(updates)
        elif strat.strategy == "qfedavg":
            global_params = aggregate_qfedavg(current, updates, strat.q, lipschitz)
        else:
            global_params, yogi = aggregate_fedyogi(current, updates, yogi, strat.eta_g, strat.tau,
                                                    (strat.server_beta1, strat.server_beta2))
        if not np.all(np.isfinite(global_params.flatten())):
            raise TrainingError(f"global model diverged (non-finite parameters) in round {r}")
        val_score, _ = evaluate(global_params, data.val, cfg.metrics)
        rounds.append({
            "round": r,
            "per_client": {
                "F_k": [u.loss_at_global for u in updates],
                "n_k": [u.n_k for u in updates],
                "local_train_loss": [u.local_train_loss for u in updates],
                "val_fbeta": _slice_scores(global_params, data.val, data.val_slices, cfg.metrics),
            },
            "global_val_fbeta": val_score,
        })
        if val_score > best_score:
            best_round, best_score, best_params = r, val_score, global_params
        log.debug("round %d: val F-beta %.4f", r, val_score)

    test_score, cm = evaluate(best_params, data.test, cfg.metrics)
    client_scores = _slice_scores(best_params, data.test, data.test_slices, cfg.metrics)
    final = {"fbeta": test_score, "confusion": cm, "per_client_fbeta": client_scores,
             "fairness": _fairness(client_scores), "beta": cfg.metrics.beta,
             "threshold": cfg.metrics.threshold}
    return RunHistory("federated", rounds, best_round, final)


def _train_isolated(shard: Dataset, val: Dataset, cfg: FedRunConfig, init: ModelParams,
                    stream: int) -> tuple[list[float], int, ModelParams]:
    """Continuous training for E*R epochs with a checkpoint every E epochs."""
    rng = derive_rng(cfg.seed, "isolated", stream)
    params, state = init, None
    scores: list[float] = []
    best_round, best_score, best_params = 0, -1.0, init
    for r in range(1, cfg.global_rounds + 1):
        params, state = train_epochs(params, shard, cfg.train, cfg.local_epochs, rng, state)
        if not np.all(np.isfinite(params.flatten())):
            raise TrainingError(f"model diverged (non-finite parameters) at checkpoint {r}")
        score, _ = evaluate(params, val, cfg.metrics)
        scores.append(score)
        if score > best_score:
            best_round, best_score, best_params = r, score, params
    return scores, best_round, best_params


def run_central(train: Dataset, val: Dataset, test: Dataset, cfg: FedRunConfig, init: ModelParams,
                test_slices: list[np.ndarray] | None = None) -> RunHistory:
    """One model on the pooled training split, same epoch budget as a federated run."""
    cfg.validate()
    if len(train) == 0:
        raise TrainingError("empty training split")
    scores, best_round, best = _train_isolated(train, val, cfg, init, 0)
    test_score, cm = evaluate(best, test, cfg.metrics)
    client_scores = _slice_scores(best, test, test_slices, cfg.metrics)
    rounds = [{"round": r + 1, "global_val_fbeta": s} for r, s in enumerate(scores)]
    final = {"fbeta": test_score, "confusion": cm, "per_client_fbeta": client_scores,
             "fairness": _fairness(client_scores), "beta": cfg.metrics.beta,
             "threshold": cfg.metrics.threshold}
    return RunHistory("central", rounds, best_round, final)


def run_local(data: FedData, cfg: FedRunConfig, init: ModelParams, jobs: int = 1) -> RunHistory:
    """Each client trains alone; reports the mean of per-client pooled-test F-beta."""
    cfg.validate()
    if any(len(s) == 0 for s in data.shards):
        raise TrainingError("a client shard is empty")

    def job(k: int):
        return _train_isolated(data.shards[k], data.val, cfg, init, k)

    results = _map(job, list(range(len(data.shards))), jobs)
    per_client = []
    test_scores = []
    for k, (scores, best_round, best) in enumerate(results):
        score, cm = evaluate(best, data.test, cfg.metrics)
        test_scores.append(score)
        per_client.append({"client": k, "n_k": len(data.shards[k]), "best_round": best_round,
                           "test_fbeta": score, "confusion": cm})
    rounds = []
    for r in range(cfg.global_rounds):
        vals = [res[0][r] for res in results]
        rounds.append({"round": r + 1, "per_client": {"val_fbeta": vals},
                       "global_val_fbeta": float(np.mean(vals))})
    best_round = int(np.argmax([row["global_val_fbeta"] for row in rounds])) + 1
    final = {"fbeta": float(np.mean(test_scores)), "per_client_fbeta": test_scores,
             "fairness": fairness_entropy(test_scores), "beta": cfg.metrics.beta,
             "threshold": cfg.metrics.threshold}
    return RunHistory("local", rounds, best_round, final, per_client=per_client)
