"""Acceptance suite: one recorded PASS/FAIL line per criterion.

The desk-scale runs train on the bundled benchmark data and take several
minutes each; they carry the ``desk_scale`` marker so they can be
deselected with ``-m "not desk_scale"``.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import integrate, stats

from oanade.data import apply_stats, build_adult, build_digits, default_raw_dir, kfold, load_red_wine, split, standardize
from oanade.inference import EnsembleSpec, avg_test_loglik, ensemble_logdensity, logdensity, sample
from oanade.model import (
    MaskContext,
    ModelConfig,
    conditional_logdensity,
    fixed_order_logdensity_1hl,
    masked_loss_and_gradient,
    predict_mog,
)
from oanade.numerics import Rng, finite_diff_gradient
from oanade.training import TrainConfig, fit

from oracles import all_binary, exact_j_oa, naive_fixed_order_1hl, random_params, rel_err


def test_estimator_unbiasedness(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed, hidden in [(0, (5,)), (1, (6, 4)), (2, (3, 3, 3))]:
        cfg = ModelConfig(D=4, hidden_sizes=hidden)
        p = random_params(cfg, seed, scale=1.0)
        for x in all_binary(4)[[0, 5, 10, 15]]:
            avg = 0.0
            for d in range(1, 5):
                subsets = list(itertools.combinations(range(4), d - 1))
                for s in subsets:
                    loss = masked_loss_and_gradient(p, x, MaskContext.from_observed(s, 4))[0]
                    avg += loss / (4 * len(subsets))
            worst = max(worst, abs(avg - exact_j_oa(p, x)))
    secs = time.perf_counter() - t0
    criterion(worst <= 1e-10 and secs < 1.0, f"max |enumerated estimator - exact J_OA| = {worst:.2e} (<= 1e-10), {secs:.2f}s (< 1s)")


def test_gradient_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    for head, L, act in itertools.product(("binary", "mog"), (1, 2, 3), ("relu", "sigmoid")):
        for rep in range(2):
            D = int(rng.integers(2, 6))
            cfg = ModelConfig(D=D, hidden_sizes=tuple(int(h) for h in rng.integers(2, 6, size=L)),
                              activation=act, head=head, components=int(rng.integers(1, 4)))
            p = random_params(cfg, int(rng.integers(1 << 30)))
            x = (rng.uniform(size=D) < 0.5).astype(float) if head == "binary" else rng.standard_normal(D)
            ctx = MaskContext.from_observed(rng.permutation(D)[: rng.integers(0, D)], D)
            _, g = masked_loss_and_gradient(p, x, ctx)
            num = p.with_flat(finite_diff_gradient(
                lambda th: masked_loss_and_gradient(p.with_flat(th), x, ctx)[0], p.flat(), 1e-5))
            worst = max([worst] + [rel_err(g[k], num[k]) for k in p])
            n += 1
    secs = time.perf_counter() - t0
    criterion(n >= 20 and worst < 1e-6 and secs < 30,
              f"{n} configurations, max per-tensor relative error {worst:.2e} (< 1e-6), {secs:.1f}s (< 30s)")


def test_normalization(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_bin = 0.0
    for D, hidden in [(8, (6,)), (7, (5, 4)), (6, (4, 4, 3))]:
        p = random_params(ModelConfig(D=D, hidden_sizes=hidden), D, scale=1.2)
        X = all_binary(D)
        for _ in range(5):
            worst_bin = max(worst_bin, abs(np.exp(logdensity(p, X, rng.permutation(D))).sum() - 1.0))
    worst_mog = 0.0
    for seed, hidden in [(0, (6,)), (1, (5, 4))]:
        cfg = ModelConfig(D=3, hidden_sizes=hidden, head="mog", components=5)
        p = random_params(cfg, seed)
        x = rng.standard_normal(3)
        for observed in ([], [0], [1, 2]):
            ctx = MaskContext.from_observed(observed, 3)
            out = predict_mog(p, x, ctx)
            for t in set(range(3)) - set(observed):
                mu, sg = out.mu[t], out.sigma[t]

                def dens(v):
                    xx = x.copy()
                    xx[t] = v
                    return math.exp(conditional_logdensity(out, xx, t))

                val, _ = integrate.quad(dens, float((mu - 12 * sg).min()), float((mu + 12 * sg).max()),
                                        points=sorted(mu.tolist()), limit=500, epsabs=1e-12, epsrel=1e-12)
                worst_mog = max(worst_mog, abs(val - 1.0))
    secs = time.perf_counter() - t0
    criterion(worst_bin <= 1e-8 and worst_mog <= 1e-6 and secs < 60,
              f"binary |sum - 1| max {worst_bin:.1e} (<= 1e-8), mog |integral - 1| max {worst_mog:.1e} (<= 1e-6), {secs:.1f}s")


def test_sampler_density_agreement(criterion):
    t0 = time.perf_counter()
    # trained toy: a correlated D=3 distribution
    truth = np.array([0.30, 0.02, 0.05, 0.13, 0.04, 0.16, 0.10, 0.20])
    g = np.random.default_rng(0)
    X = all_binary(3)[g.choice(8, size=5000, p=truth)]
    cfg = ModelConfig(D=3, hidden_sizes=(16,))
    tc = TrainConfig(iterations=10, updates_per_iteration=100, minibatch_size=50, initial_lr=0.05, seed=2)
    params = fit(cfg, X, X[:1000], tc).params
    order = [2, 0, 1]
    S = sample(params, order, Rng(11), n=100_000)
    observed = np.bincount((S @ np.array([4, 2, 1])).astype(int), minlength=8)
    expected = 100_000 * np.exp(logdensity(params, all_binary(3), order))
    pval = stats.chisquare(observed, expected).pvalue
    secs = time.perf_counter() - t0
    criterion(pval > 0.0027 and secs < 60, f"chi-square p = {pval:.3f} (> 0.0027, i.e. not rejected at 3 sigma), {secs:.1f}s")


def test_recursion_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    for case in range(100):
        D = int(rng.integers(1, 13))
        cfg = ModelConfig(D=D, hidden_sizes=(int(rng.integers(1, 20)),),
                          activation=("relu", "sigmoid")[case % 2], use_input_masks=False)
        p = random_params(cfg, case, scale=1.0)
        x = (rng.uniform(size=D) < 0.5).astype(float)
        order = rng.permutation(D)
        worst = max(worst, abs(fixed_order_logdensity_1hl(p, x, order) - naive_fixed_order_1hl(p, x, order)))
    secs = time.perf_counter() - t0
    criterion(worst <= 1e-10 and secs < 10, f"100 cases, max difference {worst:.1e} (<= 1e-10), {secs:.2f}s")


@pytest.fixture(scope="module")
def adult():
    return build_adult(default_raw_dir(), Rng(0).substream("prep", 0))


def test_ensemble_dominance(criterion, adult):
    train, valid, test = adult
    cfg = ModelConfig(D=123, hidden_sizes=(50,))
    tc = TrainConfig(iterations=3, updates_per_iteration=200, minibatch_size=100, initial_lr=0.016, seed=4)
    params = fit(cfg, train.values, valid.values, tc).params
    spec = EnsembleSpec.random(123, 16, Rng(3))
    lp = np.stack([logdensity(params, test.values, o) for o in spec.orderings])
    gap = ensemble_logdensity(params, test.values, spec) - lp.mean(axis=0)
    criterion(np.all(gap >= -1e-12),
              f"trained Adult model, 16 orderings, all {test.N} test rows: min(ensemble - mean) = {gap.min():.2e} (>= 0)")


# -- desk-scale quantitative runs ---------------------------------------------
# Learning rates pinned after a one-time exploratory run, selected on
# validation J_OA only (see the decisions ledger for the grid results).
ADULT_LR = 0.016
WINE_LR, WINE_WD = 0.02, 0.002
DIGITS_LR = 0.001


@pytest.mark.desk_scale
def test_adult_desk_scale(criterion, adult):
    train, valid, test = adult
    cfg = ModelConfig(D=123, hidden_sizes=(500,))
    tc = TrainConfig(iterations=100, updates_per_iteration=500, minibatch_size=100, initial_lr=ADULT_LR, seed=1)
    params = fit(cfg, train.values, valid.values, tc).params
    rep = avg_test_loglik(params, test.values, 16, Rng(0).substream("orderings"), seed=0)
    gain = rep.ensemble - rep.mean
    soft = "sd < stderr" if rep.sd < rep.stderr else "sd >= stderr"
    criterion(rep.mean >= -14.5 and gain >= 0.1,
              f"test loglik {rep.mean:.3f} (>= -14.5), EoNADE-16 {rep.ensemble:.3f} "
              f"gain {gain:.3f} (>= 0.1); soft check: sd {rep.sd:.3f} vs stderr {rep.stderr:.3f} ({soft})")


@pytest.mark.desk_scale
def test_red_wine_desk_scale(criterion):
    ds = load_red_wine(default_raw_dir())
    train, test = kfold(ds, 10, 0, Rng(0).substream("prep", 0))
    train, valid = split(train, (8 / 9, 1 / 9), Rng(0).substream("split"))
    train, st = standardize(train)
    valid, test = apply_stats(valid, st), apply_stats(test, st)
    cfg = ModelConfig(D=11, hidden_sizes=(50,), head="mog", components=20)
    tc = TrainConfig(iterations=100, updates_per_iteration=100, minibatch_size=100, initial_lr=WINE_LR,
                     weight_decay=WINE_WD, seed=1)
    params = fit(cfg, train.values, valid.values, tc).params
    rep = avg_test_loglik(params, test.values, 10, Rng(5))
    pair = avg_test_loglik(params, test.values, 2, Rng(5))
    criterion(rep.mean >= -10.3 and pair.ensemble > pair.mean,
              f"fold 0 test loglik {rep.mean:.3f} over 10 orderings (>= -10.3), "
              f"2-ordering ensemble {pair.ensemble:.3f} vs mean {pair.mean:.3f} (ensemble must be higher)")


@pytest.mark.desk_scale
def test_mask_ablation_direction(criterion):
    train, valid = build_digits(default_raw_dir(), Rng(0).substream("prep", 0))
    tc = TrainConfig(iterations=10, updates_per_iteration=500, minibatch_size=100, initial_lr=DIGITS_LR, seed=1)
    scores = {}
    for masks in (True, False):
        cfg = ModelConfig(D=784, hidden_sizes=(500,), use_input_masks=masks)
        result = fit(cfg, train.values, valid.values, tc)
        scores[masks] = min(r[2] for r in result.history.rows)
    margin = scores[False] - scores[True]
    criterion(margin > 0, f"validation J_OA masked {scores[True]:.2f} vs unmasked {scores[False]:.2f}, "
                          f"margin {margin:.2f} nats (> 0)")
