import itertools
import math

import numpy as np
import pytest
from scipy import stats

from oanade.inference import logdensity
from oanade.model import (
    MaskContext,
    ModelConfig,
    Parameters,
    batch_loss_and_gradient,
    init_parameters,
    masked_loss_and_gradient,
)
from oanade.numerics import Rng
from oanade.training import (
    TrainConfig,
    TrainingDiverged,
    fit,
    lr_at,
    minibatch_loss_grad,
    nesterov_step,
    pretrain_deep,
    sample_context,
    sample_masks,
    train,
    validation_loss,
)

from oracles import all_binary, binary_kl, exact_j_oa, random_params


def one_param(value):
    cfg = ModelConfig(D=1, hidden_sizes=(1,), use_input_masks=False)
    t = {"W1": np.zeros((1, 1)), "c1": np.zeros(1), "V": np.zeros((1, 1)), "b": np.array([value])}
    return Parameters(cfg, t)


def bowl(p):
    """f = 0.5 * b^2 on the single bias entry."""
    g = p.zeros_like()
    g.tensors["b"] = p["b"].copy()
    return 0.5 * float(p["b"][0] ** 2), g


class TestContexts:
    def test_d1(self):
        rng = Rng(0)
        for _ in range(20):
            ctx = sample_context(rng, 1)
            assert ctx.d == 1 and ctx.observed == frozenset()

    @pytest.mark.parametrize("sampler", ["context", "masks"])
    def test_d_uniform(self, sampler):
        rng = Rng(1)
        if sampler == "context":
            d = np.array([sample_context(rng, 3).d for _ in range(60000)])
        else:
            d = sample_masks(rng, 60000, 3).sum(axis=1).astype(int) + 1
        counts = np.bincount(d, minlength=4)[1:]
        sd = math.sqrt(60000 * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - 20000) < 3 * sd)

    @pytest.mark.parametrize("sampler", ["context", "masks"])
    def test_singletons_given_d2(self, sampler):
        rng = Rng(2)
        if sampler == "context":
            obs = [next(iter(c.observed)) for c in (sample_context(rng, 3) for _ in range(60000)) if c.d == 2]
        else:
            M = sample_masks(rng, 60000, 3)
            obs = np.argmax(M[M.sum(axis=1) == 1], axis=1).tolist()
        counts = np.bincount(obs, minlength=3)
        n = len(obs)
        assert np.all(np.abs(counts - n / 3) < 3 * math.sqrt(n * (1 / 3) * (2 / 3)))

    def test_masks_all_subsets_of_each_size(self):
        M = sample_masks(Rng(3), 80000, 4)
        keys = (M @ (2 ** np.arange(4))).astype(int)
        counts = np.bincount(keys, minlength=16)
        sizes = np.array([bin(k).count("1") for k in range(16)])
        assert counts[0] > 0
        for s in (1, 2, 3):
            c = counts[sizes == s]
            expected = np.full(len(c), c.sum() / len(c))
            assert stats.chisquare(c, expected).pvalue > 0.0027
        assert counts[15] == 0


class TestLoss:
    def test_forced_single_context(self):
        cfg = ModelConfig(D=4, hidden_sizes=(5,), head="mog", components=2)
        p = random_params(cfg, 0)
        x = np.random.default_rng(0).standard_normal(4)
        ctx = MaskContext.from_observed([1, 2], 4)
        loss, g = minibatch_loss_grad(p, x[None], masks=ctx.m[None])
        l2, g2 = masked_loss_and_gradient(p, x, ctx)
        assert loss == l2
        assert g.flat().tobytes() == g2.flat().tobytes()

    def test_duplicated_example(self):
        cfg = ModelConfig(D=4, hidden_sizes=(3,))
        p = random_params(cfg, 0)
        x = np.array([1.0, 0.0, 1.0, 1.0])
        M = np.tile(MaskContext.from_observed([3], 4).m, (6, 1))
        loss, _ = minibatch_loss_grad(p, np.tile(x, (6, 1)), masks=M)
        assert loss == pytest.approx(masked_loss_and_gradient(p, x, MaskContext.from_observed([3], 4))[0], abs=1e-13)

    def test_weight_decay_only_on_weights(self):
        cfg = ModelConfig(D=3, hidden_sizes=(4,))
        p = random_params(cfg, 0)
        X = np.array([[1.0, 0.0, 1.0]])
        M = np.zeros((1, 3))
        _, g0 = minibatch_loss_grad(p, X, masks=M)
        _, g1 = minibatch_loss_grad(p, X, masks=M, weight_decay=0.1)
        np.testing.assert_allclose(g1["W1"] - g0["W1"], 0.1 * p["W1"], atol=1e-15)
        np.testing.assert_array_equal(g1["c1"], g0["c1"])
        np.testing.assert_array_equal(g1["b"], g0["b"])


class TestUnbiased:
    def enumerate_estimator(self, p, x):
        D = p.config.D
        total = 0.0
        for d in range(1, D + 1):
            subsets = list(itertools.combinations(range(D), d - 1))
            for s in subsets:
                total += masked_loss_and_gradient(p, x, MaskContext.from_observed(s, D))[0] / (D * len(subsets))
        return total

    @pytest.mark.parametrize("hidden", [(5,), (4, 3)])
    def test_exhaustive(self, hidden):
        cfg = ModelConfig(D=4, hidden_sizes=hidden)
        p = random_params(cfg, 4, scale=1.0)
        x = np.array([1.0, 0.0, 0.0, 1.0])
        assert abs(self.enumerate_estimator(p, x) - exact_j_oa(p, x)) <= 1e-10

    def test_monte_carlo(self):
        cfg = ModelConfig(D=4, hidden_sizes=(5,))
        p = random_params(cfg, 4, scale=1.0)
        x = np.array([1.0, 0.0, 0.0, 1.0])
        M = sample_masks(Rng(0), 100_000, 4)
        losses, _ = batch_loss_and_gradient(p, np.tile(x, (100_000, 1)), M)
        se = losses.std(ddof=1) / math.sqrt(len(losses))
        assert abs(losses.mean() - exact_j_oa(p, x)) < 4 * se


class TestSchedule:
    def test_endpoints(self):
        assert lr_at(0, 1000, 0.01) == 0.01
        assert lr_at(1000, 1000, 0.01) == 0.0
        assert lr_at(500, 1000, 0.01) == 0.005

    def test_strictly_decreasing(self):
        v = [lr_at(t, 200, 0.3) for t in range(201)]
        assert all(a > b for a, b in zip(v, v[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(11, 10, 0.1)


class TestNesterov:
    def test_bowl_two_steps(self):
        p, v = one_param(1.0), one_param(0.0)
        p, v, _ = nesterov_step(p, v, bowl, 0.1, 0.9)
        assert v["b"][0] == pytest.approx(-0.1, abs=1e-15)
        assert p["b"][0] == pytest.approx(0.9, abs=1e-15)
        p, v, _ = nesterov_step(p, v, bowl, 0.1, 0.9)
        assert v["b"][0] == pytest.approx(0.9 * -0.1 - 0.1 * (0.9 - 0.09), abs=1e-15)
        assert v["b"][0] == pytest.approx(-0.171, abs=1e-15)
        assert p["b"][0] == pytest.approx(0.729, abs=1e-15)

    def test_zero_momentum_is_sgd(self):
        p, v = one_param(2.0), one_param(0.0)
        p, _, _ = nesterov_step(p, v, bowl, 0.25, 0.0)
        assert p["b"][0] == 2.0 - 0.25 * 2.0

    def test_zero_gradient(self):
        def flat(q):
            return 0.0, q.zeros_like()
        p, v = one_param(1.5), one_param(0.0)
        for _ in range(5):
            p, v, _ = nesterov_step(p, v, flat, 0.1, 0.9)
        assert p["b"][0] == 1.5
        p, v = one_param(1.5), one_param(1.0)
        p, v, _ = nesterov_step(p, v, flat, 0.1, 0.9)
        assert v["b"][0] == 0.9 and p["b"][0] == 2.4

    def test_divergence_raises(self):
        def boom(q):
            g = q.zeros_like()
            g.tensors["b"] = np.array([np.inf])
            return 0.0, g
        with pytest.raises(TrainingDiverged, match="b"):
            nesterov_step(one_param(0.0), one_param(0.0), boom, 0.1, 0.9)


def bernoulli_data(probs, n, seed):
    return (np.random.default_rng(seed).uniform(size=(n, len(probs))) < probs).astype(float)


def product_kl(params, probs, order=(0, 1, 2)):
    X = all_binary(len(probs))
    p_true = np.prod(np.where(X == 1, probs, 1 - np.asarray(probs)), axis=1)
    return binary_kl(p_true, logdensity(params, X, list(order)))


class TestTrain:
    def test_learns_product_of_bernoullis(self):
        probs = np.array([0.8, 0.3, 0.55])
        cfg = ModelConfig(D=3, hidden_sizes=(8,))
        tc = TrainConfig(iterations=10, updates_per_iteration=100, minibatch_size=50, initial_lr=0.05, seed=5)
        X = bernoulli_data(probs, 20000, 0)
        start = init_parameters(cfg, Rng(tc.seed).substream("init", 1))
        res = fit(cfg, X, X[:2000], tc)
        kl0, kl1 = product_kl(start, probs), product_kl(res.params, probs)
        assert kl1 < kl0
        assert kl1 < 0.01
        assert product_kl(res.params, probs, (2, 0, 1)) < 0.01

    def test_early_stop_returns_argmin_snapshot(self):
        cfg = ModelConfig(D=3, hidden_sizes=(4,))
        tc = TrainConfig(iterations=6, updates_per_iteration=20, minibatch_size=10, initial_lr=0.05, seed=1)
        X = bernoulli_data([0.7, 0.2, 0.5], 400, 1)
        snaps = {}
        res = fit(cfg, X, X[:100], tc, callback=lambda it, p, h: snaps.__setitem__(it, p.copy()))
        valid = [r[2] for r in res.history.rows]
        best = int(np.argmin(valid)) + 1
        assert res.history.best_iteration == best
        assert res.params.flat().tobytes() == snaps[best].flat().tobytes()
        assert validation_loss(res.params, X[:100], tc.seed ^ 0x5EED) == min(valid)

    def test_no_improvement_returns_first_iteration(self):
        cfg = ModelConfig(D=3, hidden_sizes=(4,))
        tc = TrainConfig(iterations=4, updates_per_iteration=30, minibatch_size=10, initial_lr=0.05, seed=1)
        snaps = {}
        res = fit(cfg, np.zeros((50, 3)), np.ones((20, 3)), tc,
                  callback=lambda it, p, h: snaps.__setitem__(it, p.copy()))
        valid = [r[2] for r in res.history.rows]
        assert all(a < b for a, b in zip(valid, valid[1:]))
        assert res.history.best_iteration == 1
        assert res.params.flat().tobytes() == snaps[1].flat().tobytes()

    def test_deterministic_history(self):
        cfg = ModelConfig(D=3, hidden_sizes=(4, 3))
        tc = TrainConfig(iterations=3, updates_per_iteration=10, minibatch_size=8, initial_lr=0.01,
                         pretrain_iterations=2, seed=9)
        X = bernoulli_data([0.7, 0.2, 0.5], 100, 2)
        a = fit(cfg, X, X[:30], tc)
        b = fit(cfg, X, X[:30], tc)
        assert a.history.to_tsv() == b.history.to_tsv()
        assert a.params.flat().tobytes() == b.params.flat().tobytes()
        assert a.history.to_tsv().startswith("#iteration")
        assert len(a.history.rows) == 3

    def test_validation_frozen(self):
        cfg = ModelConfig(D=5, hidden_sizes=(4,))
        p = random_params(cfg, 0)
        X = bernoulli_data([0.5] * 5, 64, 0)
        assert validation_loss(p, X, 3) == validation_loss(p, X, 3)
        assert validation_loss(p, X, 3, batch=7) == pytest.approx(validation_loss(p, X, 3, batch=64), abs=1e-12)

    def test_data_shape_checked(self):
        cfg = ModelConfig(D=3, hidden_sizes=(2,))
        with pytest.raises(ValueError):
            train(random_params(cfg, 0), np.zeros((5, 4)), None, TrainConfig(iterations=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(initial_lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)


class TestPretrain:
    def test_one_layer_is_plain_init(self):
        cfg = ModelConfig(D=3, hidden_sizes=(4,))
        tc = TrainConfig(iterations=2, updates_per_iteration=5, minibatch_size=4, seed=3)
        X = bernoulli_data([0.5, 0.1, 0.9], 40, 0)
        p, levels = pretrain_deep(cfg, X, X[:10], tc)
        assert levels == []
        assert p.flat().tobytes() == init_parameters(cfg, Rng(3).substream("init", 1)).flat().tobytes()
        with_pt = fit(cfg, X, X[:10], tc, pretrain=True)
        without = fit(cfg, X, X[:10], tc, pretrain=False)
        assert with_pt.params.flat().tobytes() == without.params.flat().tobytes()

    def test_three_layers(self):
        cfg = ModelConfig(D=3, hidden_sizes=(5, 4, 6))
        tc = TrainConfig(iterations=1, updates_per_iteration=3, minibatch_size=4, pretrain_iterations=20, seed=3)
        X = bernoulli_data([0.5, 0.1, 0.9], 40, 0)
        p, levels = pretrain_deep(cfg, X, X[:10], tc)
        assert p.config.hidden_sizes == (5, 4, 6)
        assert levels == [(2, 20), (3, 20)]
        res = fit(cfg, X, X[:10], tc)
        assert res.history.pretrain_levels == [(2, 20), (3, 20)]
