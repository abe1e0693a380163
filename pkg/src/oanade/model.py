"""Shared-parameter masked deep NADE network.

One feed-forward network maps ``concat(x * m, m)`` (or just ``x * m`` when
input masks are off) to the parameters of all D one-dimensional
conditionals at once.  Outputs for dimensions already in the mask are
computed but never enter the loss.

Dimensions are 0-based everywhere in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .numerics import LOG_2PI, log_sum_exp, relu, relu_grad, sigmoid

BINARY = "binary"
MOG = "mog"
ACTIVATIONS = ("relu", "sigmoid")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    D: int
    hidden_sizes: tuple = (500,)
    activation: str = "relu"
    head: str = BINARY
    components: int = 1
    use_input_masks: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one hidden layer, all widths >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in (BINARY, MOG):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == MOG and self.components < 1:
            raise ValueError("mog head needs components >= 1")

    @property
    def n_layers(self):
        return len(self.hidden_sizes)

    @property
    def n_inputs(self):
        return 2 * self.D if self.use_input_masks else self.D

    @property
    def K(self):
        return self.components if self.head == MOG else 1

    def tensor_shapes(self):
        """Ordered mapping name -> shape of every parameter tensor."""
        shapes = {}
        fan_in = self.n_inputs
        for l, h in enumerate(self.hidden_sizes, start=1):
            shapes[f"W{l}"] = (h, fan_in)
            shapes[f"c{l}"] = (h,)
            fan_in = h
        if self.head == BINARY:
            shapes["V"] = (self.D, fan_in)
            shapes["b"] = (self.D,)
        else:
            dk = self.D * self.components
            for part in ("logit", "mu", "logstd"):
                shapes[f"V_{part}"] = (dk, fan_in)
                shapes[f"b_{part}"] = (dk,)
        return shapes

    def to_dict(self):
        return {
            "D": self.D,
            "hidden_sizes": list(self.hidden_sizes),
            "activation": self.activation,
            "head": self.head,
            "components": self.components,
            "use_input_masks": self.use_input_masks,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Parameters:
    """All weight matrices and bias vectors of one model, keyed by name."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        shapes = config.tensor_shapes()
        if set(tensors) != set(shapes):
            raise ValueError(f"tensor names {sorted(tensors)} do not match config {sorted(shapes)}")
        self.tensors = {}
        for name, shape in shapes.items():
            t = np.asarray(tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise ValueError(f"tensor {name} has shape {t.shape}, expected {shape}")
            self.tensors[name] = t

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def weight_names(self):
        return [n for n in self.tensors if n.startswith(("W", "V"))]

    def copy(self):
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self):
        return Parameters(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = {}, 0
        for name, t in self.tensors.items():
            out[name] = vec[pos:pos + t.size].reshape(t.shape)
            pos += t.size
        if pos != vec.size:
            raise ValueError("flat vector length does not match parameter count")
        return Parameters(self.config, out)

    @property
    def size(self):
        return sum(t.size for t in self.tensors.values())

    def axpy(self, alpha, other):
        """Return ``self + alpha * other``."""
        return Parameters(self.config, {k: v + alpha * other.tensors[k] for k, v in self.tensors.items()})

    def scale(self, alpha):
        return Parameters(self.config, {k: alpha * v for k, v in self.tensors.items()})


def init_parameters(config: ModelConfig, rng) -> Parameters:
    """Glorot-uniform weights, zero biases."""
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if len(shape) == 2:
            fan_out, fan_in = shape
            if name.startswith("V_") and config.head == MOG:
                fan_out = config.D  # one set of K outputs per dimension
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = (2.0 * rng.uniform(shape) - 1.0) * bound
        else:
            tensors[name] = np.zeros(shape)
    return Parameters(config, tensors)


def zero_parameters(config: ModelConfig) -> Parameters:
    return Parameters(config, {k: np.zeros(s) for k, s in config.tensor_shapes().items()})


@dataclass(frozen=True)
class MaskContext:
    """Position ``d`` (1-based, as in the ordering) with its observed set."""

    D: int
    observed: frozenset

    @classmethod
    def from_observed(cls, observed: Iterable[int], D: int):
        obs = frozenset(int(i) for i in observed)
        if any(i < 0 or i >= D for i in obs):
            raise ValueError(f"observed indices must lie in [0, {D})")
        return cls(D, obs)

    @property
    def d(self):
        return len(self.observed) + 1

    @property
    def m(self):
        m = np.zeros(self.D)
        m[list(self.observed)] = 1.0
        return m


@dataclass
class MoGParams:
    """Mixture parameters for every dimension: arrays of shape (..., D, K)."""

    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    log_pi: np.ndarray = field(repr=False, default=None)
    log_sigma: np.ndarray = field(repr=False, default=None)


@dataclass
class ForwardPass:
    inputs: np.ndarray
    pre: list
    acts: list
    raw: object  # (B, D) logits for binary, dict of (B, D, K) arrays for mog


def rescale_factor(D, d):
    """Weight D/(D-d+1) that makes a single context an unbiased estimate."""
    return D / (D - d + 1)


def masked_inputs(X, M, config: ModelConfig):
    """Rows ``concat(x * m, m)`` (or ``x * m``) for a batch of data and masks."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if X.shape[1] != config.D or M.shape != X.shape:
        raise ValueError(f"expected data and masks of width {config.D}, got {X.shape} and {M.shape}")
    xm = X * M
    return np.hstack([xm, M]) if config.use_input_masks else xm


def build_masked_input(x, ctx: MaskContext, config: ModelConfig):
    return masked_inputs(x, ctx.m, config)[0]


def _activate(z, kind):
    return relu(z) if kind == "relu" else sigmoid(z)


def _activation_grad(z, h, kind):
    return relu_grad(z) if kind == "relu" else h * (1.0 - h)


def forward(params: Parameters, inputs) -> ForwardPass:
    cfg = params.config
    h = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if h.shape[1] != cfg.n_inputs:
        raise ValueError(f"input width {h.shape[1]} does not match first layer ({cfg.n_inputs})")
    inputs = h
    pre, acts = [], []
    for l in range(1, cfg.n_layers + 1):
        z = h @ params[f"W{l}"].T + params[f"c{l}"]
        h = _activate(z, cfg.activation)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activation in hidden layer {l}")
        pre.append(z)
        acts.append(h)
    if cfg.head == BINARY:
        raw = h @ params["V"].T + params["b"]
    else:
        B, K = h.shape[0], cfg.components
        raw = {part: (h @ params[f"V_{part}"].T + params[f"b_{part}"]).reshape(B, cfg.D, K)
               for part in ("logit", "mu", "logstd")}
    return ForwardPass(inputs, pre, acts, raw)


def mog_from_raw(logit, mu, logstd) -> MoGParams:
    if np.any(logstd > 700.0):
        bad = np.argwhere(logstd > 700.0)[0]
        raise FloatingPointError(f"log-std output overflows exp at index {tuple(bad)}")
    log_pi = logit - log_sum_exp(logit, axis=-1)[..., None]
    return MoGParams(np.exp(log_pi), mu, np.exp(logstd), log_pi, logstd)


def binary_loglik(z, x):
    """log p(x | logit z) for x in {0, 1} with clamped probabilities.

    Returns (loglik, d loglik / dz).
    """
    p, q = sigmoid(z), sigmoid(-z)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    qc = np.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = x * np.log(pc) + (1.0 - x) * np.log(qc)
    dp = (pc == p).astype(np.float64)
    dq = (qc == q).astype(np.float64)
    grad = x * q * dp - (1.0 - x) * p * dq
    return ll, grad


def mog_loglik(logit, mu, logstd, x):
    """log of a K-component Gaussian mixture at x; K is the last axis.

    Returns (loglik, dict of d loglik / d raw output, same shapes as inputs).
    """
    mog = mog_from_raw(logit, mu, logstd)
    r = (x[..., None] - mu) / mog.sigma
    comp = mog.log_pi - 0.5 * LOG_2PI - logstd - 0.5 * r * r
    ll = log_sum_exp(comp, axis=-1)
    resp = np.exp(comp - ll[..., None])
    grads = {
        "logit": resp - mog.pi,
        "mu": resp * r / mog.sigma,
        "logstd": resp * (r * r - 1.0),
    }
    return ll, grads


def dimension_loglik(params: Parameters, fp: ForwardPass, X):
    """Per-dimension conditional log-densities (B, D) and their raw-output grads."""
    X = np.atleast_2d(X)
    if params.config.head == BINARY:
        return binary_loglik(fp.raw, X)
    raw = fp.raw
    return mog_loglik(raw["logit"], raw["mu"], raw["logstd"], X)


def predict_binary(params: Parameters, x, ctx: MaskContext):
    if params.config.head != BINARY:
        raise ValueError("predict_binary needs a binary head")
    fp = forward(params, build_masked_input(x, ctx, params.config))
    return sigmoid(fp.raw[0])


def predict_mog(params: Parameters, x, ctx: MaskContext) -> MoGParams:
    if params.config.head != MOG:
        raise ValueError("predict_mog needs a mog head")
    fp = forward(params, build_masked_input(x, ctx, params.config))
    return mog_from_raw(fp.raw["logit"][0], fp.raw["mu"][0], fp.raw["logstd"][0])


def conditional_logdensity(outputs, x, target, ctx: MaskContext | None = None):
    """log p(x_target | observed) from ``predict_binary``/``predict_mog`` output."""
    if ctx is not None and target in ctx.observed:
        raise ValueError(f"dimension {target} is observed; its conditional is not defined")
    xt = float(np.asarray(x, dtype=np.float64)[target])
    if isinstance(outputs, MoGParams):
        lp = np.log(outputs.pi[target]) if outputs.log_pi is None else outputs.log_pi[target]
        comp = lp - 0.5 * LOG_2PI - np.log(outputs.sigma[target]) \
            - 0.5 * ((xt - outputs.mu[target]) / outputs.sigma[target]) ** 2
        return log_sum_exp(comp)
    p = float(np.clip(outputs[target], PROB_CLAMP, 1.0 - PROB_CLAMP))
    return xt * math.log(p) + (1.0 - xt) * math.log1p(-p)


def batch_loss_and_gradient(params: Parameters, X, M, weights=None):
    """Order-agnostic loss for a batch with one context (mask row) per example.

    Loss per example is D/(D-d+1) * sum of -log p over its unobserved
    dimensions.  Returns (per-example losses, gradient of
    ``sum(weights * losses)``); ``weights`` defaults to 1/B (batch mean).
    """
    cfg = params.config
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    B, D = X.shape
    fp = forward(params, masked_inputs(X, M, cfg))
    ll, dll = dimension_loglik(params, fp, X)
    free = 1.0 - M
    d = M.sum(axis=1) + 1.0
    factor = D / (D - d + 1.0)
    losses = -factor * np.sum(free * ll, axis=1)
    if not np.all(np.isfinite(losses)):
        b = int(np.argmax(~np.isfinite(losses)))
        dim = int(np.argmax(~np.isfinite(ll[b]) * free[b]))
        raise FloatingPointError(f"non-finite loss for example {b} at dimension {dim}")
    if weights is None:
        weights = np.full(B, 1.0 / B)
    # d(sum w * loss)/d(loglik) = -w * factor * free
    coef = -(np.asarray(weights) * factor)[:, None] * free

    grads = {}
    L = cfg.n_layers
    h_top = fp.acts[-1]
    if cfg.head == BINARY:
        G = coef * dll
        grads["V"] = G.T @ h_top
        grads["b"] = G.sum(axis=0)
        dh = G @ params["V"]
    else:
        dh = 0.0
        for part in ("logit", "mu", "logstd"):
            G = (coef[..., None] * dll[part]).reshape(B, -1)
            grads[f"V_{part}"] = G.T @ h_top
            grads[f"b_{part}"] = G.sum(axis=0)
            dh = dh + G @ params[f"V_{part}"]
    for l in range(L, 0, -1):
        dz = dh * _activation_grad(fp.pre[l - 1], fp.acts[l - 1], cfg.activation)
        below = fp.acts[l - 2] if l > 1 else fp.inputs
        grads[f"W{l}"] = dz.T @ below
        grads[f"c{l}"] = dz.sum(axis=0)
        if l > 1:
            dh = dz @ params[f"W{l}"]
    return losses, Parameters(cfg, grads)


def masked_loss_and_gradient(params: Parameters, x, ctx: MaskContext):
    losses, grad = batch_loss_and_gradient(params, x, ctx.m, weights=np.ones(1))
    return float(losses[0]), grad


def fixed_order_logdensity_1hl(params: Parameters, x, order):
    """Classic tied-weight NADE recursion along a fixed ordering, O(DH).

    Only defined for a single hidden layer, binary head and no input masks.
    """
    cfg = params.config
    if cfg.n_layers != 1 or cfg.head != BINARY or cfg.use_input_masks:
        raise ValueError("fixed-order recursion needs 1 hidden layer, binary head, no input masks")
    x = np.asarray(x, dtype=np.float64)
    W, V, b = params["W1"], params["V"], params["b"]
    a = params["c1"].copy()
    total = 0.0
    for i in order:
        h = _activate(a, cfg.activation)
        ll, _ = binary_loglik(V[i] @ h + b[i], x[i])
        total += float(ll)
        a += x[i] * W[:, i]
    return total
