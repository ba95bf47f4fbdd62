import tempfile
from pathlib import Path
from unittest import skipUnless
from unittest.mock import patch

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from sdgd import env
from sdgd.approx import finite_difference, relative_error
from sdgd.dataset import OfflineDataset, compute_return, prefix_infeasible, return_condition_scale
from sdgd.diffusion import Denoiser, TrainConfig, make_schedule
from sdgd.exceptions import DatasetFormatError
from sdgd.guidance import (
    GuidanceConfig,
    GuidedSampler,
    NoisyRegressor,
    cfg_score,
    compose_cfg,
    compose_sdgd,
    conditional_score,
    hinge_cost_gradient,
    infeasibility_auc,
    regression_auc,
    sdgd_score,
    swapped_score,
    train_cost_model,
    train_regressor,
    train_return_denoiser,
    train_reward_model,
)

FLAT_DIM = 4
N = 10


def _models(seed=0):
    denoiser = Denoiser.create(FLAT_DIM, N, hidden=(8,), seed=seed)
    reward = NoisyRegressor.create(FLAT_DIM, N, 'ftr', hidden=(8,), seed=seed + 1)
    cost = NoisyRegressor.create(FLAT_DIM, N, 'cost', hidden=(8,), seed=seed + 2)
    return denoiser, reward, cost


class ComposeTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.s_cond, self.s_uncond, self.grad = rng.standard_normal((3, 5, FLAT_DIM))

    def test_cfg_algebra(self):
        for w in (0.0, 1.0, 2.0, 4.0, 8.0):
            assert_allclose(compose_cfg(self.s_cond, self.s_uncond, w),
                            (1 + w) * self.s_cond - w * self.s_uncond)
        assert_array_equal(compose_cfg(self.s_cond, self.s_uncond, 0.0), self.s_cond)

    def test_sdgd_algebra(self):
        s_safe = compose_cfg(self.s_cond, self.s_uncond, 4.0)
        for lam in (0.0, 0.01, 0.08):
            assert_allclose(compose_sdgd(s_safe, self.grad, lam), s_safe + lam * self.grad)
        assert_array_equal(compose_sdgd(s_safe, self.grad, 0.0), s_safe)

    def test_cfg_score_without_weight_is_conditional(self):
        schedule = make_schedule(N)
        denoiser, _, _ = _models()
        x = np.random.default_rng(1).standard_normal((3, FLAT_DIM))
        assert_allclose(cfg_score(denoiser, schedule, x, 4, 0.5, 0.0),
                        conditional_score(denoiser, schedule, x, 4, denoiser.embed(0.5)))

    def test_sdgd_score_without_reward_weight_is_cfg(self):
        schedule = make_schedule(N)
        denoiser, reward, _ = _models()
        x = np.random.default_rng(2).standard_normal((3, FLAT_DIM))
        config = GuidanceConfig(w=2.0, lam=0.0)
        assert_array_equal(sdgd_score(denoiser, reward, schedule, x, 7, 0.5, config),
                           cfg_score(denoiser, schedule, x, 7, 0.5, 2.0))


class RegressorTests(SimpleTestCase):
    def setUp(self):
        self.model = NoisyRegressor.create(FLAT_DIM, N, 'ftr', hidden=(8,), seed=1, target_mean=2.0, target_std=3.0)

    def test_zero_network_predicts_target_mean(self):
        self.model.net.params[:] = 0.0
        assert_array_equal(self.model.predict(np.ones((2, FLAT_DIM)), 3), [2.0, 2.0])

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for s in (1, 5, N):
            x = rng.standard_normal(FLAT_DIM)
            numeric = finite_difference(lambda v: float(self.model.predict(v[None], s)[0]), x, eps=1e-6)
            analytic = self.model.input_gradient(x[None], s)[0]
            self.assertLess(relative_error(analytic, numeric), 1e-3)

    def test_hinge_gradient(self):
        x = np.random.default_rng(4).standard_normal((6, FLAT_DIM))
        assert_array_equal(hinge_cost_gradient(self.model, x, 2, 1e9), np.zeros((6, FLAT_DIM)))
        assert_allclose(hinge_cost_gradient(self.model, x, 2, -1e9), self.model.input_gradient(x, 2))

    def test_hinge_gradient_matches_finite_differences(self):
        x = np.random.default_rng(6).standard_normal(FLAT_DIM)
        s = 3
        predicted = float(self.model.predict(x[None], s)[0])
        for offset in (-0.5, 0.5):
            l = predicted + offset

            def hinge(v):
                return max(0.0, float(self.model.predict(v[None], s)[0]) - l)

            numeric = finite_difference(hinge, x, eps=1e-6)
            analytic = hinge_cost_gradient(self.model, x[None], s, l)[0]
            with self.subTest(offset=offset):
                if offset < 0:
                    self.assertGreater(np.abs(analytic).max(), 0.0)
                    self.assertLess(relative_error(analytic, numeric), 1e-3)
                else:
                    assert_array_equal(analytic, np.zeros(FLAT_DIM))
                    assert_array_equal(numeric, np.zeros(FLAT_DIM))

    def test_hinge_inactive_at_the_limit(self):
        x = np.random.default_rng(7).standard_normal((1, FLAT_DIM))
        l = float(self.model.predict(x, 5)[0])
        assert_array_equal(hinge_cost_gradient(self.model, x, 5, l), np.zeros((1, FLAT_DIM)))

    def test_swapped_score_subtracts_hinge_gradient(self):
        schedule = make_schedule(N)
        return_denoiser = Denoiser.create(FLAT_DIM, N, hidden=(8,), seed=9, condition='return',
                                          condition_scale=(-2.0, 6.0))
        config = GuidanceConfig(w=2.0, lam=0.05)
        x = np.random.default_rng(8).standard_normal(FLAT_DIM)
        l = float(self.model.predict(x[None], 4)[0]) - 0.5

        def hinge(v):
            return max(0.0, float(self.model.predict(v[None], 4)[0]) - l)

        numeric = finite_difference(hinge, x, eps=1e-6)
        guided = swapped_score(return_denoiser, self.model, schedule, x[None], 4, 0.75, l, config)
        plain = cfg_score(return_denoiser, schedule, x[None], 4, 0.75, 2.0)
        assert_allclose((plain - guided)[0] / 0.05, numeric, rtol=1e-4, atol=1e-6)

    def test_save_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self.model.save(Path(tmp) / 'reward.sdgdnn')
            loaded = NoisyRegressor.load(path)
            self.assertEqual((loaded.mode, loaded.target_mean, loaded.target_std), ('ftr', 2.0, 3.0))
            x = np.ones((1, FLAT_DIM))
            assert_allclose(loaded.predict(x, 2), self.model.predict(x, 2), atol=1e-4)

    def test_denoiser_checkpoint_is_not_a_regressor(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Denoiser.create(FLAT_DIM, N, hidden=(4,)).save(Path(tmp) / 'denoiser.sdgdnn')
            with self.assertRaises(DatasetFormatError):
                NoisyRegressor.load(path)


class AucTests(SimpleTestCase):
    def test_perfect_separation(self):
        self.assertEqual(regression_auc([0.0, 0.1, 0.2], [1.0, 2.0]), 1.0)
        self.assertEqual(regression_auc([1.0, 2.0], [0.0, 0.1]), 0.0)

    def test_ties_count_half(self):
        self.assertEqual(regression_auc([1.0, 1.0], [1.0, 1.0]), 0.5)


class GuidanceConfigTests(SimpleTestCase):
    def test_lambda_alias(self):
        self.assertEqual(GuidanceConfig(**{'lambda': 0.08}).lam, 0.08)

    def test_invalid_values_rejected(self):
        for kwargs in ({'w': -1.0}, {'lam': -0.1}, {'f': 0}, {'r_us': 0.0}, {'p_uncond': 1.5}):
            with self.assertRaises(ValidationError):
                GuidanceConfig(**kwargs)


class GuidedSamplerTests(SimpleTestCase):
    def setUp(self):
        self.schedule = make_schedule(N)
        self.denoiser, self.reward, self.cost = _models()
        self.config = GuidanceConfig(w=2.0, lam=0.05)
        self.x = np.random.default_rng(5).standard_normal((3, FLAT_DIM))

    def test_ablation_variants_zero_one_weight(self):
        no_cg = GuidedSampler('no_cg', self.denoiser, self.schedule, self.config, self.reward)
        no_cfg = GuidedSampler('no_cfg', self.denoiser, self.schedule, self.config, self.reward)
        self.assertEqual((no_cg.config.lam, no_cg.config.w), (0.0, 2.0))
        self.assertEqual((no_cfg.config.lam, no_cfg.config.w), (0.05, 0.0))
        assert_array_equal(no_cfg.condition(0.5), [[0.0, 0.0]])
        assert_array_equal(no_cg.condition(0.5), [[0.5, 1.0]])

    def test_sdgd_hook_completes_conditional_score(self):
        sampler = GuidedSampler('sdgd', self.denoiser, self.schedule, self.config, self.reward)
        s_cond = conditional_score(self.denoiser, self.schedule, self.x, 6, sampler.condition(0.5))
        expected = sdgd_score(self.denoiser, self.reward, self.schedule, self.x, 6, 0.5, self.config)
        assert_allclose(s_cond + sampler.hook(0.5)(self.x, 6), expected, atol=1e-10)

    def test_no_cfg_hook_is_reward_gradient(self):
        sampler = GuidedSampler('no_cfg', self.denoiser, self.schedule, self.config, self.reward)
        assert_allclose(sampler.hook(0.5)(self.x, 3), 0.05 * self.reward.input_gradient(self.x, 3))
        silent = GuidedSampler('no_cfg', self.denoiser, self.schedule, self.config.model_copy(update={'lam': 0.0}))
        assert_array_equal(silent.hook(0.5)(self.x, 3), np.zeros_like(self.x))

    def test_unguided_hook_is_zero(self):
        config = GuidanceConfig(w=0.0, lam=0.0)
        sampler = GuidedSampler('no_cg', self.denoiser, self.schedule, config)
        assert_allclose(sampler.hook(0.5)(self.x, 3), np.zeros_like(self.x), atol=1e-12)

    def test_swapped_uses_return_denoiser(self):
        return_denoiser = Denoiser.create(FLAT_DIM, N, hidden=(8,), seed=9, condition='return',
                                          condition_scale=(-2.0, 6.0))
        sampler = GuidedSampler('swapped', self.denoiser, self.schedule, self.config, cost_model=self.cost,
                                return_denoiser=return_denoiser, target_return=0.75)
        self.assertIs(sampler.sampling_denoiser, return_denoiser)
        assert_allclose(sampler.condition(0.5), [[0.75, 1.0]])
        self.assertEqual(sampler.hook(0.5)(self.x, 4).shape, self.x.shape)

    def test_invalid_construction(self):
        with self.assertRaises(ValueError):
            GuidedSampler('greedy', self.denoiser, self.schedule, self.config)
        with self.assertRaises(ValueError):
            GuidedSampler('sdgd', self.denoiser, self.schedule, self.config)
        with self.assertRaises(ValueError):
            GuidedSampler('swapped', self.denoiser, self.schedule, self.config, cost_model=self.cost)


class TrainingTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        spec = env.make_spec('ChainVel1D', episode_len=16)
        policies = ['safe', 'greedy', 'random']
        episodes = [env.rollout(spec, policies[i % 3], i, action_noise=0.02) for i in range(6)]
        cls.dataset = OfflineDataset(spec, episodes, horizon=8, stride=4)
        cls.schedule = make_schedule(N)
        cls.config = TrainConfig(steps=20, batch_size=16, lr=1e-3, hidden=(8,), log_every=10)

    def test_ftr_reward_model(self):
        model, report = train_reward_model(self.dataset, self.schedule, 'ftr', self.config, f=4)
        self.assertEqual((model.mode, model.f, model.r_us), ('ftr', 4, self.dataset.default_r_us()))
        self.assertEqual(sorted(report.heldout_mse_by_step), [1, 2, 5, 10])
        self.assertEqual(len(report.trace), 3)

    def test_raw_reward_and_cost_models(self):
        raw, _ = train_reward_model(self.dataset, self.schedule, 'raw', self.config, f=4)
        cost, _ = train_cost_model(self.dataset, self.schedule, self.config)
        self.assertIsNone(raw.r_us)
        self.assertEqual(cost.mode, 'cost')
        self.assertAlmostEqual(cost.target_mean, float(np.mean(self.dataset.segment_costs[
            self.dataset.split(0.1, 0)[0]])))

    def test_unknown_reward_mode(self):
        with self.assertRaises(ValueError):
            train_reward_model(self.dataset, self.schedule, 'shaped', self.config, f=4)

    def test_return_denoiser(self):
        r_us = self.dataset.default_r_us()
        denoiser, _ = train_return_denoiser(self.dataset, self.config, N, f=4, r_us=r_us)
        self.assertEqual(denoiser.condition, 'return')
        assert_allclose(denoiser.condition_scale, return_condition_scale(self.dataset, 4, r_us))
        self.assertEqual(denoiser.horizon, 8)

    def test_constant_target_is_learned(self):
        targets = np.full(len(self.dataset), 3.5)
        model, report = train_regressor(self.dataset, self.schedule, targets, 'cost', self.config)
        self.assertLess(report.heldout_mse, 1e-2)
        assert_allclose(model.predict(self.dataset.x0[:3], 1), 3.5, atol=0.1)

    def test_ftr_targets_are_relabeled_returns(self):
        r_us = -5.0
        with patch('sdgd.guidance.train_regressor', wraps=train_regressor) as trained:
            train_reward_model(self.dataset, self.schedule, 'ftr', self.config, f=4, r_us=r_us)
        targets = trained.call_args.args[2]
        expected = [compute_return(self.dataset.segment(i), self.dataset.gamma)
                    + r_us * prefix_infeasible(self.dataset.segment(i), 4) for i in range(len(self.dataset))]
        assert_allclose(targets, expected, rtol=0, atol=1e-12)

    def test_same_seed_gives_identical_weights(self):
        a, report_a = train_reward_model(self.dataset, self.schedule, 'ftr', self.config, f=4)
        b, report_b = train_reward_model(self.dataset, self.schedule, 'ftr', self.config, f=4)
        assert_array_equal(a.net.params, b.net.params)
        self.assertEqual(report_a, report_b)
        c, _ = train_reward_model(self.dataset, self.schedule, 'ftr',
                                  self.config.model_copy(update={'seed': 1}), f=4)
        self.assertFalse(np.array_equal(a.net.params, c.net.params))

    def test_ranking_auc_with_exact_labels(self):
        r_us = self.dataset.default_r_us()
        infeasible = self.dataset.prefix_infeasibility(4).astype(bool)
        self.assertTrue(infeasible.any() and not infeasible.all())
        indices = np.arange(len(self.dataset))
        r_hat = self.dataset.relabeled_returns(4, r_us)
        self.assertEqual(infeasibility_auc(_LabelPredictor(r_hat), self.schedule, self.dataset, indices, 4), 1.0)
        self.assertEqual(infeasibility_auc(_LabelPredictor(-r_hat), self.schedule, self.dataset, indices, 4), 0.0)
        feasible = indices[~infeasible]
        self.assertIsNone(infeasibility_auc(_LabelPredictor(r_hat[feasible]), self.schedule, self.dataset,
                                            feasible, 4))


class _LabelPredictor:
    """Reward model stand-in that returns fixed scores for the rows it is asked about."""

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=float)

    def predict(self, x, s):
        return self.scores.copy()


@skipUnless(settings.SDGD_RUN_SLOW_TESTS, 'slow: set SDGD_RUN_SLOW_TESTS=1')
class TrainedRewardRankingTests(SimpleTestCase):
    def test_ftr_model_ranks_infeasible_segments_last(self):
        spec = env.make_spec('ChainVel1D')
        policies = ['safe', 'greedy', 'random']
        episodes = [env.rollout(spec, policies[i % 3], i, action_noise=0.02) for i in range(60)]
        dataset = OfflineDataset(spec, episodes, horizon=32, stride=8)
        config = TrainConfig(steps=5000, batch_size=128, lr=1e-3, hidden=(64, 64), log_every=500)
        _, report = train_reward_model(dataset, make_schedule(100), 'ftr', config, f=8)
        self.assertIsNotNone(report.ranking_auc)
        self.assertGreater(report.ranking_auc, 0.95)
