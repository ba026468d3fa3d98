"""Dense MLP primitives in NumPy: init, forward/backward, weighted CE, ADAM.

Hidden layers compute ``affine -> batch norm -> ReLU -> dropout``; the output
layer is a plain affine map to two logits.  Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ModelError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

TRAIN = "train"
EVAL = "eval"


@dataclass
class ModelParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gamma: list[np.ndarray] = field(default_factory=list)
    beta: list[np.ndarray] = field(default_factory=list)
    running_mean: list[np.ndarray] = field(default_factory=list)
    running_var: list[np.ndarray] = field(default_factory=list)
    batch_norm: bool = True

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    def validate(self) -> None:
        sizes = self.layer_sizes
        if len(sizes) < 2 or sizes[-1] != 2:
            raise ModelError(f"layer sizes must end with 2 outputs, got {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ModelError("number of weight/bias arrays does not match layer sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ModelError(f"layer {i} has shapes {w.shape}/{b.shape}, expected "
                                 f"{(sizes[i + 1], sizes[i])}/{(sizes[i + 1],)}")
        n_bn = self.n_hidden if self.batch_norm else 0
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arrs = getattr(self, name)
            if len(arrs) != n_bn:
                raise ModelError(f"expected {n_bn} {name} arrays, got {len(arrs)}")
            for i, a in enumerate(arrs):
                if a.shape != (sizes[i + 1],):
                    raise ModelError(f"{name}[{i}] has shape {a.shape}")
        if any(np.any(v < 0) for v in self.running_var):
            raise ModelError("running_var must be non-negative")

    def trainable(self) -> list[np.ndarray]:
        """Trainable arrays in canonical order (per hidden layer W, b, gamma, beta; then output W, b)."""
        out: list[np.ndarray] = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if self.batch_norm and i < self.n_hidden:
                out.append(self.gamma[i])
                out.append(self.beta[i])
        return out

    def buffers(self) -> list[np.ndarray]:
        """Non-trainable batch-norm statistics."""
        return [*self.running_mean, *self.running_var]

    def arrays(self) -> list[np.ndarray]:
        return self.trainable() + self.buffers()

    def with_arrays(self, trainable: Sequence[np.ndarray], buffers: Sequence[np.ndarray] | None = None) -> ModelParams:
        """Copy of self with the given trainable arrays (and optionally buffers) swapped in."""
        trainable = list(trainable)
        weights, biases, gamma, beta = [], [], [], []
        pos = 0
        for i in range(len(self.weights)):
            weights.append(trainable[pos])
            biases.append(trainable[pos + 1])
            pos += 2
            if self.batch_norm and i < self.n_hidden:
                gamma.append(trainable[pos])
                beta.append(trainable[pos + 1])
                pos += 2
        if pos != len(trainable):
            raise ModelError("trainable array count mismatch")
        if buffers is None:
            rm, rv = self.running_mean, self.running_var
        else:
            buffers = list(buffers)
            half = len(buffers) // 2
            rm, rv = buffers[:half], buffers[half:]
        return ModelParams(self.layer_sizes, weights, biases, gamma, beta, list(rm), list(rv), self.batch_norm)

    def copy(self) -> ModelParams:
        return self.with_arrays([a.copy() for a in self.trainable()], [a.copy() for a in self.buffers()])

    def flatten(self, trainable_only: bool = False) -> np.ndarray:
        arrs = self.trainable() if trainable_only else self.arrays()
        return np.concatenate([a.ravel() for a in arrs]).astype(np.float64, copy=False)

    def unflatten(self, vec: np.ndarray, trainable_only: bool = False) -> ModelParams:
        """Inverse of :meth:`flatten`, using ``self`` as the shape template."""
        vec = np.asarray(vec, dtype=np.float64)
        template = self.trainable() if trainable_only else self.arrays()
        total = sum(a.size for a in template)
        if vec.shape != (total,):
            raise ModelError(f"flat vector has shape {vec.shape}, expected ({total},)")
        out, pos = [], 0
        for a in template:
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        n_train = len(self.trainable())
        if trainable_only:
            return self.with_arrays(out)
        return self.with_arrays(out[:n_train], out[n_train:])


def mlp_init(layer_sizes: Sequence[int], seed: int, batch_norm: bool = True) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 3:
        raise ModelError(f"need input, at least one hidden layer and output, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ModelError(f"layer sizes must be positive, got {sizes}")
    if sizes[-1] != 2:
        raise ModelError(f"last layer must have 2 units, got {sizes[-1]}")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    hidden = sizes[1:-1] if batch_norm else ()
    params = ModelParams(
        layer_sizes=sizes,
        weights=weights,
        biases=biases,
        gamma=[np.ones(h) for h in hidden],
        beta=[np.zeros(h) for h in hidden],
        running_mean=[np.zeros(h) for h in hidden],
        running_var=[np.ones(h) for h in hidden],
        batch_norm=batch_norm,
    )
    return params


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]          # input to each affine layer
    xhat: list[np.ndarray | None]     # normalized pre-activations (Train BN only)
    inv_std: list[np.ndarray | None]
    relu_mask: list[np.ndarray]
    drop_mask: list[np.ndarray | None]
    new_running_mean: list[np.ndarray]
    new_running_var: list[np.ndarray]
    layer_sizes: tuple[int, ...]
    logits: np.ndarray | None = None


def forward(
    params: ModelParams,
    batch: np.ndarray,
    mode: str = EVAL,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on ``batch`` and return ``(logits, cache)``.

    In Train mode batch statistics are used for normalization and the updated
    running statistics are returned in the cache (params are not mutated);
    dropout needs ``rng`` when ``dropout > 0``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ModelError(f"batch shape {x.shape} does not match input size {params.layer_sizes[0]}")
    n = x.shape[0]
    if n < 1:
        raise ModelError("empty batch")
    train = mode == TRAIN
    if mode not in (TRAIN, EVAL):
        raise ModelError(f"unknown mode {mode!r}")
    if train and params.batch_norm and params.n_hidden > 0 and n < 2:
        raise ModelError("Train-mode batch norm needs at least 2 samples per batch")
    if train and dropout > 0 and rng is None:
        raise ModelError("dropout in Train mode needs an rng")

    cache = ForwardCache([], [], [], [], [], [], [], params.layer_sizes)
    h = x
    for i in range(params.n_hidden):
        cache.inputs.append(h)
        z = h @ params.weights[i].T + params.biases[i]
        if params.batch_norm:
            if train:
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (z - mean) * inv_std
                unbiased = var * n / (n - 1)
                cache.new_running_mean.append((1 - BN_MOMENTUM) * params.running_mean[i] + BN_MOMENTUM * mean)
                cache.new_running_var.append((1 - BN_MOMENTUM) * params.running_var[i] + BN_MOMENTUM * unbiased)
                cache.xhat.append(xhat)
                cache.inv_std.append(inv_std)
            else:
                xhat = (z - params.running_mean[i]) / np.sqrt(params.running_var[i] + BN_EPS)
                cache.xhat.append(None)
                cache.inv_std.append(None)
            z = params.gamma[i] * xhat + params.beta[i]
        else:
            cache.xhat.append(None)
            cache.inv_std.append(None)
        mask = z > 0
        h = z * mask
        cache.relu_mask.append(mask)
        if train and dropout > 0:
            keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * keep
            cache.drop_mask.append(keep)
        else:
            cache.drop_mask.append(None)
    cache.inputs.append(h)
    logits = h @ params.weights[-1].T + params.biases[-1]
    cache.logits = logits
    return logits, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _sample_weights(labels: np.ndarray, class_weights: Sequence[float]) -> np.ndarray:
    cw = np.asarray(class_weights, dtype=np.float64)
    if cw.shape != (2,) or np.any(cw < 0):
        raise ModelError(f"class_weights must be two non-negative numbers, got {class_weights}")
    return cw[labels]


def weighted_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, class_weights: Sequence[float] = (1.0, 1.0)
) -> tuple[float, np.ndarray]:
    """Class-weighted mean CE; returns ``(loss, per_sample_ce)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise ModelError(f"logits {logits.shape} and labels {labels.shape} are inconsistent")
    w = _sample_weights(labels, class_weights)
    total = w.sum()
    if total <= 0:
        raise ModelError("all samples in the batch have zero class weight")
    per_sample = -log_softmax(logits)[np.arange(labels.shape[0]), labels]
    return float((w * per_sample).sum() / total), per_sample


@dataclass
class Gradients:
    """Gradients for ``ModelParams.trainable()``, same order and shapes."""

    arrays: list[np.ndarray]


def backward(
    params: ModelParams,
    cache: ForwardCache,
    labels: np.ndarray,
    class_weights: Sequence[float],
) -> Gradients:
    """Exact gradients of :func:`weighted_cross_entropy` for a Train-mode forward pass."""
    if cache.layer_sizes != params.layer_sizes or len(cache.inputs) != params.n_hidden + 1:
        raise ModelError("forward cache does not belong to these params")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if cache.inputs[0].shape[0] != n:
        raise ModelError("cache batch size does not match labels")
    w = _sample_weights(labels, class_weights)
    total = w.sum()
    if total <= 0:
        return Gradients([np.zeros_like(a) for a in params.trainable()])

    probs = softmax(cache.logits)
    probs[np.arange(n), labels] -= 1.0
    d = probs * (w / total)[:, None]

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    grads_g = [None] * params.n_hidden
    grads_be = [None] * params.n_hidden

    grads_w[-1] = d.T @ cache.inputs[-1]
    grads_b[-1] = d.sum(axis=0)
    dh = d @ params.weights[-1]
    for i in reversed(range(params.n_hidden)):
        if cache.drop_mask[i] is not None:
            dh = dh * cache.drop_mask[i]
        dz = dh * cache.relu_mask[i]
        if params.batch_norm:
            xhat = cache.xhat[i]
            if xhat is None:
                raise ModelError("backward needs a Train-mode forward cache")
            grads_g[i] = (dz * xhat).sum(axis=0)
            grads_be[i] = dz.sum(axis=0)
            dxhat = dz * params.gamma[i]
            dz = cache.inv_std[i] / n * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        grads_w[i] = dz.T @ cache.inputs[i]
        grads_b[i] = dz.sum(axis=0)
        dh = dz @ params.weights[i]

    out: list[np.ndarray] = []
    for i in range(len(params.weights)):
        out.append(grads_w[i])
        out.append(grads_b[i])
        if params.batch_norm and i < params.n_hidden:
            out.append(grads_g[i])
            out.append(grads_be[i])
    return Gradients(out)


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        arrs = params.trainable()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], 0)


def adam_step(
    state: AdamState,
    params: ModelParams,
    grads: Gradients,
    lr: float,
    cfg: AdamConfig | None = None,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected ADAM update; inputs are not mutated."""
    cfg = cfg or AdamConfig()
    if lr <= 0:
        raise ModelError(f"learning rate must be positive, got {lr}")
    current = params.trainable()
    if len(current) != len(grads.arrays) or len(current) != len(state.m):
        raise ModelError("ADAM state, params and gradients are not congruent")
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(current, grads.arrays, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ModelError(f"shape mismatch in ADAM step: {p.shape} vs {g.shape}")
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), AdamState(new_m, new_v, t)
