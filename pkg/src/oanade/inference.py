"""Exact inference with a trained order-agnostic NADE.

Every query is answered by picking an ordering that puts the conditioned
dimensions first and the marginalised ones last; the model for that
ordering is then an ordinary autoregressive density.

Evaluation walks the ordering one position at a time and keeps the first
hidden layer's pre-activation up to date incrementally (adding the newly
observed column of the input weights and of the mask weights) instead of
rebuilding the masked input at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import BINARY, Parameters, binary_loglik, mog_from_raw, mog_loglik, _activate
from .numerics import log_sum_exp, sample_permutation, sigmoid


def check_ordering(order, D):
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (D,) or not np.array_equal(np.sort(order), np.arange(D)):
        raise ValueError(f"not a permutation of range({D}): {order.tolist()}")
    return order


class _Walker:
    """Steps one ordering through the network for a batch of rows."""

    def __init__(self, params: Parameters, B):
        self.params = params
        self.cfg = params.config
        D = self.cfg.D
        W1 = params["W1"]
        self.Wx = W1[:, :D]
        self.Wm = W1[:, D:] if self.cfg.use_input_masks else None
        self.a = np.broadcast_to(params["c1"], (B, W1.shape[0])).copy()

    def top_hidden(self):
        cfg, p = self.cfg, self.params
        h = _activate(self.a, cfg.activation)
        for l in range(2, cfg.n_layers + 1):
            h = _activate(h @ p[f"W{l}"].T + p[f"c{l}"], cfg.activation)
        return h

    def raw_for(self, h, i):
        """Raw head outputs for dimension ``i`` only."""
        p = self.params
        if self.cfg.head == BINARY:
            return h @ p["V"][i] + p["b"][i]
        K = self.cfg.components
        rows = slice(i * K, (i + 1) * K)
        return {part: h @ p[f"V_{part}"][rows].T + p[f"b_{part}"][rows]
                for part in ("logit", "mu", "logstd")}

    def loglik(self, raw, xi):
        if self.cfg.head == BINARY:
            return binary_loglik(raw, xi)[0]
        return mog_loglik(raw["logit"], raw["mu"], raw["logstd"], xi)[0]

    def observe(self, i, xi):
        self.a += np.outer(xi, self.Wx[:, i])
        if self.Wm is not None:
            self.a += self.Wm[:, i]


def ordered_log_conditionals(params: Parameters, X, order, n=None):
    """log p(x_{o_d} | x_{o_<d}) for positions d = 0..n-1 of ``order``.

    Returns an array of shape (N, n).  Dimensions after position n are
    never touched, so their values in ``X`` are irrelevant.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    order = np.asarray(order, dtype=np.int64)
    n = len(order) if n is None else n
    walker = _Walker(params, X.shape[0])
    out = np.empty((X.shape[0], n))
    for pos in range(n):
        i = order[pos]
        h = walker.top_hidden()
        out[:, pos] = walker.loglik(walker.raw_for(h, i), X[:, i])
        if pos + 1 < n:
            walker.observe(i, X[:, i])
    return out


def logdensity(params: Parameters, X, order):
    """log p(x | o) for one row (returns float) or a matrix of rows."""
    X = np.asarray(X, dtype=np.float64)
    order = check_ordering(order, params.config.D)
    lp = ordered_log_conditionals(params, X, order).sum(axis=1)
    return float(lp[0]) if X.ndim == 1 else lp


@dataclass
class Query:
    """p(targets | conditioned), marginalising every other dimension.

    ``conditioned`` and ``targets`` map dimension -> value.
    """

    conditioned: dict
    targets: dict

    def validate(self, D):
        c, t = set(self.conditioned), set(self.targets)
        if c & t:
            raise ValueError(f"dimensions {sorted(c & t)} are both conditioned and targets")
        if any(i < 0 or i >= D for i in c | t):
            raise ValueError(f"query dimensions must lie in [0, {D})")

    def marginalized(self, D):
        return sorted(set(range(D)) - set(self.conditioned) - set(self.targets))


def query_ordering(q: Query, D, rng):
    """Conditioned dims (shuffled), then targets (shuffled), then the rest (shuffled)."""
    blocks = []
    for dims in (sorted(q.conditioned), sorted(q.targets), q.marginalized(D)):
        dims = np.asarray(dims, dtype=np.int64)
        blocks.append(dims[rng.permutation(len(dims))])
    return np.concatenate(blocks)


def query_logdensity(params: Parameters, q: Query, rng, order=None):
    """log p(x_targets | x_conditioned) under a query-adapted ordering."""
    D = params.config.D
    q.validate(D)
    if not q.targets:
        return 0.0
    if order is None:
        order = query_ordering(q, D, rng)
    x = np.zeros(D)
    for i, v in {**q.conditioned, **q.targets}.items():
        x[i] = v
    nc, nt = len(q.conditioned), len(q.targets)
    lc = ordered_log_conditionals(params, x, order, n=nc + nt)
    return float(lc[0, nc:].sum())


def _draw(walker: _Walker, raw, rng, B):
    if walker.cfg.head == BINARY:
        return (rng.uniform(B) < sigmoid(raw)).astype(np.float64)
    mog = mog_from_raw(raw["logit"], raw["mu"], raw["logstd"])
    cdf = np.cumsum(mog.pi, axis=-1)
    k = np.sum(rng.uniform(B)[:, None] > cdf, axis=-1)
    k = np.minimum(k, mog.pi.shape[-1] - 1)
    rows = np.arange(B)
    return mog.mu[rows, k] + mog.sigma[rows, k] * rng.normal(B)


def sample(params: Parameters, order, rng, n=1, prefix=None):
    """Ancestral samples along ``order``.

    ``prefix`` optionally fixes the values of the first len(prefix)
    dimensions of the ordering (a 1-D array in ordering order); only the
    remaining positions are drawn.  Returns an (n, D) array.
    """
    D = params.config.D
    order = check_ordering(order, D)
    X = np.zeros((n, D))
    if n == 0:
        return X
    start = 0
    walker = _Walker(params, n)
    if prefix is not None:
        prefix = np.asarray(prefix, dtype=np.float64)
        start = len(prefix)
        for pos in range(start):
            i = order[pos]
            X[:, i] = prefix[pos]
            walker.observe(i, X[:, i])
    for pos in range(start, D):
        i = order[pos]
        h = walker.top_hidden()
        X[:, i] = _draw(walker, walker.raw_for(h, i), rng, n)
        walker.observe(i, X[:, i])
    return X


@dataclass
class Imputation:
    marginal_logdensity: float
    samples: np.ndarray
    order: np.ndarray


def impute(params: Parameters, x_observed, observed, rng, n_samples=1):
    """Marginal density of the observed dims plus completions of the rest."""
    D = params.config.D
    observed = sorted(int(i) for i in observed)
    x = np.asarray(x_observed, dtype=np.float64)
    obs = np.asarray(observed, dtype=np.int64)
    missing = np.asarray(sorted(set(range(D)) - set(observed)), dtype=np.int64)
    order = np.concatenate([obs[rng.permutation(len(obs))], missing[rng.permutation(len(missing))]])
    k = len(obs)
    marginal = float(ordered_log_conditionals(params, x, order, n=k).sum()) if k else 0.0
    if len(missing) == 0:
        samples = np.tile(x, (n_samples, 1))
    else:
        samples = sample(params, order, rng, n_samples, prefix=x[order[:k]])
    return Imputation(marginal, samples, order)


@dataclass
class EnsembleSpec:
    orderings: list
    seed: int | None = None

    def __post_init__(self):
        if len(self.orderings) < 1:
            raise ValueError("an ensemble needs at least one ordering")

    @classmethod
    def random(cls, D, K, rng, seed=None):
        return cls([sample_permutation(rng, D) for _ in range(K)], seed)


def per_ordering_logdensity(params: Parameters, X, orderings):
    """(K, N) matrix of log p(x_n | o_k)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.stack([logdensity(params, X, o) for o in orderings])


def ensemble_logdensity(params: Parameters, X, spec: EnsembleSpec):
    """log of the probability averaged over the ensemble's orderings."""
    X = np.asarray(X, dtype=np.float64)
    lp = per_ordering_logdensity(params, X, spec.orderings)
    out = log_sum_exp(lp, axis=0) - math.log(len(spec.orderings))
    return float(out[0]) if X.ndim == 1 else out


def sample_ensemble(params: Parameters, spec: EnsembleSpec, rng, n):
    """One ordering picked uniformly per sample, then ancestral sampling."""
    D = params.config.D
    picks = rng.integers(0, len(spec.orderings), size=n)
    X = np.zeros((n, D))
    for k in np.unique(picks):
        rows = np.flatnonzero(picks == k)
        X[rows] = sample(params, spec.orderings[k], rng, len(rows))
    return X, picks


@dataclass
class EvalReport:
    n_orderings: int
    seed: int | None
    per_ordering_mean: np.ndarray
    mean: float
    sd: float
    stderr: float
    ensemble: float
    per_example: np.ndarray = field(repr=False)

    def ensemble_curve(self, sizes):
        """Ensemble test log-likelihood for the first k orderings, k in ``sizes``."""
        return [(k, float(np.mean(log_sum_exp(self.per_example[:k], axis=0) - math.log(k))))
                for k in sizes]


def avg_test_loglik(params: Parameters, X, n_orderings, rng, seed=None):
    """Mean over random orderings of the mean test log-likelihood, plus the ensemble value.

    ``sd`` is the spread across orderings; ``stderr`` is the across-example
    standard error of the per-example log-likelihood averaged over orderings.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty test set")
    spec = EnsembleSpec.random(params.config.D, n_orderings, rng, seed)
    lp = per_ordering_logdensity(params, X, spec.orderings)
    per_ord = lp.mean(axis=1)
    avg_ex = lp.mean(axis=0)
    ens = log_sum_exp(lp, axis=0) - math.log(n_orderings)
    stderr = float(avg_ex.std(ddof=1) / math.sqrt(len(avg_ex))) if len(avg_ex) > 1 else 0.0
    return EvalReport(
        n_orderings=n_orderings,
        seed=seed,
        per_ordering_mean=per_ord,
        mean=float(per_ord.mean()),
        sd=float(per_ord.std()),
        stderr=stderr,
        ensemble=float(ens.mean()),
        per_example=lp,
    )
