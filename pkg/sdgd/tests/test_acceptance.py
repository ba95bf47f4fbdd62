"""
End-to-end checks on a fully trained ChainVel1D system. These train every
model at full size and take hours; set SDGD_RUN_SLOW_TESTS=1 to run them.
"""
import tempfile
from collections import defaultdict
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from sdgd import pipeline
from sdgd.runconfig import load_run_config

CONFIG_PATH = Path(__file__).resolve().parents[2] / 'configs' / 'chainvel.ini'


def _by_value(rows):
    grouped = defaultdict(list)
    for row in rows:
        grouped[row.value].append(row)
    return grouped


def _by_value_pairs(rows):
    grouped = defaultdict(list)
    for row in rows:
        grouped[row.lam, row.w].append(row)
    return grouped


def _mean_stderr(values):
    values = np.asarray(values, dtype=float)
    stderr = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(values.mean()), stderr


@skipUnless(settings.SDGD_RUN_SLOW_TESTS, 'slow: set SDGD_RUN_SLOW_TESTS=1')
class TrainedChainVelTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        cls.out = root / 'out'
        cls.config = load_run_config(CONFIG_PATH)
        cls.dataset = root / 'chainvel.sdgdds'
        cls.checkpoints = root / 'checkpoints'
        pipeline.gen_data(cls.config, cls.dataset)
        cls.manifest = pipeline.train(cls.config, cls.dataset, cls.checkpoints, with_swapped=True)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_reward_model_ranks_infeasible_segments_last(self):
        self.assertGreater(self.manifest['reward_ftr_auc'], pipeline.MIN_RANKING_AUC)

    def test_budget_adaptation(self):
        rows = pipeline.sweep(self.config, self.checkpoints, 'limit', self.out)
        summary = []
        for limit in pipeline.DEFAULT_LIMITS:
            group = _by_value(rows)[f'{limit:g}']
            self.assertLessEqual(np.mean([r.normalized_cost for r in group]), 1.0)
            summary.append((np.mean([r.mean_cost for r in group]), *_mean_stderr([r.mean_return for r in group])))
        for (cost_a, ret_a, se_a), (cost_b, ret_b, se_b) in zip(summary, summary[1:]):
            self.assertLessEqual(cost_a, cost_b)
            self.assertLessEqual(ret_a, ret_b + max(se_a, se_b))

    def test_time_varying_limits(self):
        config = self.config.model_copy(update={'planner': self.config.planner.model_copy(
            update={'schedule': '0:1,20:3,40:10'})})
        models = pipeline.TrainedModels(self.checkpoints)
        sampler = models.sampler('sdgd', config.guidance_config(r_us=models.r_us))
        records, _ = pipeline.run_evaluation(config, sampler, config.budget_schedule(),
                                             pipeline._reference(config, models))
        self.assertEqual(len(records), 60)
        self.assertGreaterEqual(pipeline._segment_compliance(records), 0.9)

    def test_relabeling_reduces_drift(self):
        drift = pipeline.diagnose(self.config, self.checkpoints, 'drift', self.out, self.dataset)
        self.assertGreaterEqual(drift.n_trials, 100)
        self.assertLess(drift.sign_test_p, 0.05)
        alignment = pipeline.diagnose(self.config, self.checkpoints, 'alignment', self.out, self.dataset)
        self.assertGreaterEqual(alignment.fraction_positive, 0.9)

    def test_ablation_directions(self):
        grouped = _by_value(pipeline.ablate(self.config, self.checkpoints, self.out, self.dataset))
        cost = {v: np.mean([r.normalized_cost for r in rows]) for v, rows in grouped.items()}
        ret = {v: np.mean([r.mean_return for r in rows]) for v, rows in grouped.items()}
        self.assertGreater(cost['no_cfg'], cost['sdgd'])
        self.assertLess(ret['no_cg'], ret['sdgd'])
        self.assertGreater(cost['swapped'], cost['sdgd'])

    def test_stability_grid_shape(self):
        rows = pipeline.sweep(self.config, self.checkpoints, 'lambda-w', self.out)
        grid = {}
        for (lam, w), group in _by_value_pairs(rows).items():
            grid[lam, w] = _mean_stderr([r.normalized_cost for r in group])
        lams = sorted({lam for lam, _ in grid})
        weights = sorted({w for _, w in grid})
        for lam in lams:
            for w_a, w_b in zip(weights, weights[1:]):
                (a, se_a), (b, se_b) = grid[lam, w_a], grid[lam, w_b]
                self.assertLessEqual(b, a + max(se_a, se_b))
        for w in weights:
            for lam_a, lam_b in zip(lams, lams[1:]):
                (a, se_a), (b, se_b) = grid[lam_a, w], grid[lam_b, w]
                self.assertGreaterEqual(b, a - max(se_a, se_b))

    def test_diagnostic_curves(self):
        correlation = pipeline.diagnose(self.config, self.checkpoints, 'correlation', self.out, self.dataset)
        self.assertEqual(len(correlation.steps), self.config.diffusion.N)
        self.assertLess(correlation.spearman_r_vs_step, 0.0)
        rollout = pipeline.diagnose(self.config, self.checkpoints, 'rollout', self.out, self.dataset)
        errors = [row.autoregressive_error for row in rollout.rows]
        self.assertEqual(errors, sorted(errors))
        self.assertGreater(rollout.rows[-1].autoregressive_error, rollout.rows[-1].joint_error)
