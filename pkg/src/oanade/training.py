"""Order-agnostic training: context sampling, Nesterov SGD, early stopping,
layerwise pretraining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    MaskContext,
    ModelConfig,
    Parameters,
    batch_loss_and_gradient,
    init_parameters,
)
from .numerics import Rng, sample_subset

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 100
    updates_per_iteration: int = 1000
    minibatch_size: int = 100
    initial_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    pretrain_iterations: int = 20
    seed: int = 1234
    early_stop: bool = True
    validation_batch: int = 1000

    def __post_init__(self):
        for name in ("iterations", "updates_per_iteration", "minibatch_size", "pretrain_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sample_context(rng, D) -> MaskContext:
    """d uniform on 1..D, then a uniform (d-1)-subset as the observed set."""
    d = int(rng.integers(1, D + 1))
    return MaskContext.from_observed(sample_subset(rng, D, d - 1), D)


def sample_masks(rng, B, D):
    """One independent context per row, as a (B, D) 0/1 mask matrix."""
    n_obs = rng.integers(0, D, size=B)
    ranks = np.argsort(np.argsort(rng.uniform((B, D)), axis=1), axis=1)
    return (ranks < n_obs[:, None]).astype(np.float64)


def minibatch_loss_grad(params: Parameters, X, rng=None, weight_decay=0.0, masks=None):
    """Mean order-agnostic loss and gradient over a minibatch.

    Each example gets its own context unless ``masks`` pins them.
    """
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        raise ValueError("empty minibatch")
    if masks is None:
        masks = sample_masks(rng, X.shape[0], params.config.D)
    losses, grad = batch_loss_and_gradient(params, X, masks)
    if weight_decay > 0:
        for name in params.weight_names:
            grad.tensors[name] = grad.tensors[name] + weight_decay * params[name]
    return float(losses.mean()), grad


def lr_at(t, T, initial_lr):
    if not 0 <= t <= T:
        raise ValueError(f"update index {t} outside [0, {T}]")
    return initial_lr * (1.0 - t / T)


def nesterov_step(params: Parameters, velocity: Parameters, gradient_fn, lr, momentum):
    """v <- mu*v - lr*grad(theta + mu*v); theta <- theta + v.

    ``gradient_fn`` maps Parameters to (loss, gradient Parameters).
    Returns (new params, new velocity, loss at the lookahead point).
    """
    lookahead = params.axpy(momentum, velocity) if momentum else params
    loss, grad = gradient_fn(lookahead)
    new_v = velocity.scale(momentum).axpy(-lr, grad)
    if not all(np.all(np.isfinite(v)) for _, v in new_v.items()):
        bad = [k for k, v in new_v.items() if not np.all(np.isfinite(v))]
        raise TrainingDiverged(f"non-finite update in tensors {bad} (loss {loss})")
    return params.axpy(1.0, new_v), new_v, loss


def validation_loss(params: Parameters, X, seed, batch=1000):
    """Mean order-agnostic loss on X with contexts frozen by ``seed``."""
    rng = Rng(seed).substream("validation")
    X = np.atleast_2d(X)
    masks = sample_masks(rng, X.shape[0], params.config.D)
    total = 0.0
    for s in range(0, X.shape[0], batch):
        losses, _ = batch_loss_and_gradient(params, X[s:s + batch], masks[s:s + batch])
        total += losses.sum()
    return total / X.shape[0]


@dataclass
class History:
    rows: list = field(default_factory=list)  # (iteration, train, valid, lr)
    best_iteration: int | None = None
    pretrain_levels: list = field(default_factory=list)  # (n_layers, iterations run)

    def append(self, it, train, valid, lr):
        self.rows.append((it, train, valid, lr))

    def to_tsv(self):
        lines = ["#iteration\ttrain_J_OA\tvalid_J_OA\tlr"]
        for it, tr, va, lr in self.rows:
            lines.append(f"{it}\t{tr!r}\t{va!r}\t{lr!r}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: Parameters
    history: History


def _batches(rng, N, size):
    """Endless stream of minibatch index arrays, reshuffling every epoch."""
    while True:
        perm = rng.permutation(N)
        for s in range(0, N - size + 1 if N >= size else 1, size):
            yield perm[s:s + size]


def train(params: Parameters, X_train, X_valid, tc: TrainConfig, rng: Rng | None = None,
          callback=None) -> TrainResult:
    """Nesterov SGD on the order-agnostic loss from the given starting point.

    After every iteration the validation loss is measured with contexts
    frozen by the run seed.  With ``early_stop`` the best snapshot (lowest
    validation loss, first on ties) is returned.
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    X_valid = None if X_valid is None else np.atleast_2d(np.asarray(X_valid, dtype=np.float64))
    D = params.config.D
    if X_train.shape[0] == 0 or X_train.shape[1] != D:
        raise ValueError(f"training data must be non-empty with {D} columns")
    if X_valid is not None and (X_valid.shape[0] == 0 or X_valid.shape[1] != D):
        raise ValueError(f"validation data must be non-empty with {D} columns")
    rng = rng or Rng(tc.seed)
    batch_rng = rng.substream("batches")
    ctx_rng = rng.substream("contexts")
    valid_seed = tc.seed ^ 0x5EED
    batches = _batches(batch_rng, X_train.shape[0], tc.minibatch_size)

    T = tc.iterations * tc.updates_per_iteration
    velocity = params.zeros_like()
    history = History()
    best, best_score = None, math.inf
    t = 0

    def grad_fn(p):
        return minibatch_loss_grad(p, X_train[idx], ctx_rng, tc.weight_decay)

    for it in range(1, tc.iterations + 1):
        running = 0.0
        for _ in range(tc.updates_per_iteration):
            idx = next(batches)
            lr = lr_at(t, T, tc.initial_lr)
            params, velocity, loss = nesterov_step(params, velocity, grad_fn, lr, tc.momentum)
            running += loss
            t += 1
        train_score = running / tc.updates_per_iteration
        if X_valid is not None:
            valid_score = float(validation_loss(params, X_valid, valid_seed, tc.validation_batch))
            if not math.isfinite(valid_score):
                raise TrainingDiverged(f"validation loss is {valid_score} after iteration {it}")
        else:
            valid_score = math.nan
        history.append(it, train_score, valid_score, lr_at(t, T, tc.initial_lr))
        log.info("iter %d train %.4f valid %.4f", it, train_score, valid_score)
        if callback is not None:
            callback(it, params, history)
        if tc.early_stop and X_valid is not None and valid_score < best_score:
            best, best_score = params.copy(), valid_score
            history.best_iteration = it

    if tc.early_stop and best is not None:
        return TrainResult(best, history)
    history.best_iteration = tc.iterations
    return TrainResult(params, history)


def _grow(params: Parameters, width, rng) -> Parameters:
    """Drop the output head, stack a fresh hidden layer and a fresh head."""
    cfg = params.config
    new_cfg = replace(cfg, hidden_sizes=cfg.hidden_sizes + (width,))
    fresh = init_parameters(new_cfg, rng)
    tensors = dict(fresh.tensors)
    for l in range(1, cfg.n_layers + 1):
        tensors[f"W{l}"] = params[f"W{l}"].copy()
        tensors[f"c{l}"] = params[f"c{l}"].copy()
    return Parameters(new_cfg, tensors)


def pretrain_deep(config: ModelConfig, X_train, X_valid, tc: TrainConfig, rng: Rng | None = None):
    """Layerwise pretraining: returns (Parameters, list of (layers, iterations run)).

    One hidden layer is just a random initialisation; each extra layer is
    stacked on the shallower pretrained net (whose head is discarded) and
    the whole net is trained for ``tc.pretrain_iterations`` iterations.
    """
    n = config.n_layers
    rng = rng or Rng(tc.seed)
    if n == 1:
        return init_parameters(config, rng.substream("init", 1)), []
    shallower = replace(config, hidden_sizes=config.hidden_sizes[:-1])
    try:
        params, levels = pretrain_deep(shallower, X_train, X_valid, tc, rng)
    except TrainingDiverged as e:
        raise TrainingDiverged(f"pretraining at depth {n - 1}: {e}") from e
    params = _grow(params, config.hidden_sizes[-1], rng.substream("init", n))
    short = replace(tc, iterations=tc.pretrain_iterations, early_stop=False)
    result = train(params, X_train, None, short, rng.substream("pretrain", n))
    return result.params, levels + [(n, len(result.history.rows))]


def fit(config: ModelConfig, X_train, X_valid, tc: TrainConfig, pretrain=True, callback=None):
    """Initialise (with layerwise pretraining for deep nets) and train."""
    rng = Rng(tc.seed)
    if pretrain and config.n_layers > 1:
        params, levels = pretrain_deep(config, X_train, X_valid, tc, rng)
    else:
        params, levels = init_parameters(config, rng.substream("init", 1)), []
    result = train(params, X_train, X_valid, tc, rng.substream("train"), callback)
    result.history.pretrain_levels = levels
    return result
