import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from sdgd import env
from sdgd.dataset import OfflineDataset
from sdgd.diffusion import Denoiser, make_schedule
from sdgd.exceptions import ConfigError, PlannerError, ShapeError
from sdgd.guidance import GuidanceConfig, GuidedSampler
from sdgd.planner import (
    BudgetSchedule,
    PlannerConfig,
    ReturnReference,
    normalized_metrics,
    plan_request,
    read_records,
    remaining_budget,
    run_episode,
    write_records,
)
from sdgd.schemas import EpisodeRecord, PlanLog

HORIZON = 8
N = 5


def _tiny_setup(episode_len=16):
    spec = env.make_spec('ChainVel1D', episode_len=episode_len)
    policies = ['safe', 'greedy', 'random']
    episodes = [env.rollout(spec, policies[i % 3], i, action_noise=0.02) for i in range(6)]
    dataset = OfflineDataset(spec, episodes, horizon=HORIZON, stride=4)
    denoiser = Denoiser.create(dataset.flat_dim, N, hidden=(8,), seed=0, horizon=HORIZON,
                               env_id=spec.env_id, stats=dataset.stats)
    sampler = GuidedSampler('no_cg', denoiser, make_schedule(N), GuidanceConfig(w=1.0, lam=0.0))
    return spec, dataset, sampler


def _record(total_reward, total_cost):
    return EpisodeRecord(env_id='ChainVel1D', variant='sdgd', seed=0, mode='decrement', schedule=[],
                         states=[[0.0]], actions=[], rewards=[total_reward], costs=[total_cost],
                         total_reward=total_reward, total_cost=total_cost, segment_costs=[total_cost], plans=[])


class BudgetScheduleTests(SimpleTestCase):
    def test_parse(self):
        schedule = BudgetSchedule.parse('0:2, 32:8', 64)
        self.assertEqual([(e.start, e.limit, e.horizon) for e in schedule.entries], [(0, 2.0, 32), (32, 8.0, 32)])
        self.assertEqual(schedule.end, 64)
        self.assertEqual((schedule.segment_index(31), schedule.segment_index(32)), (0, 1))

    def test_constant(self):
        schedule = BudgetSchedule.constant(4.0, 64)
        self.assertEqual(len(schedule.entries), 1)
        self.assertEqual(schedule.segment_index(63), 0)

    def test_outside_coverage(self):
        schedule = BudgetSchedule.parse('0:2', 10)
        for t in (-1, 10):
            with self.assertRaises(PlannerError):
                schedule.segment_index(t)

    def test_invalid_schedules_rejected(self):
        for text in ('5:2', '0:2,0:3', '0:2,8:-1', '0-2'):
            with self.assertRaises(ConfigError):
                BudgetSchedule.parse(text, 16)

    def test_totals_split_per_segment(self):
        schedule = BudgetSchedule.parse('0:1,2:1', 5)
        self.assertEqual(schedule.totals([1, 0, 1, 1, 0]), [1.0, 2.0])

    def test_remaining_budget(self):
        schedule = BudgetSchedule.parse('0:2,4:3', 8)
        self.assertEqual(remaining_budget(schedule, 1, [0.5, 0.0]), 1.5)
        self.assertEqual(remaining_budget(schedule, 1, [5.0, 0.0]), 0.0)
        self.assertEqual(remaining_budget(schedule, 5, [5.0, 1.0]), 2.0)


class PlannerConfigTests(SimpleTestCase):
    def test_prefix_must_fit_horizon(self):
        with self.assertRaises(ValidationError):
            PlannerConfig(horizon=8, f=9)
        with self.assertRaises(ValidationError):
            PlannerConfig(horizon=8, f=0)
        self.assertEqual(PlannerConfig(horizon=8, f=8).f, 8)


class PlanRequestTests(SimpleTestCase):
    def setUp(self):
        self.spec, self.dataset, self.sampler = _tiny_setup()
        self.config = PlannerConfig(horizon=HORIZON, f=4, N=N)

    def test_current_state_is_pinned(self):
        request = plan_request(self.sampler, self.config, self.spec, [0.3], 2.0, seed=0)
        self.assertEqual(int(request.inpaint_mask.sum()), 1)
        self.assertTrue(request.inpaint_mask[0])
        self.assertAlmostEqual(request.inpaint_values[0],
                               (0.3 - self.dataset.stats.state_mean[0]) / self.dataset.stats.state_std[0])

    def test_negative_budget_clamped(self):
        request = plan_request(self.sampler, self.config, self.spec, [0.0], -3.0, seed=0)
        assert_array_equal(request.condition, self.sampler.condition(0.0))


class RunEpisodeTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec, cls.dataset, cls.sampler = _tiny_setup()

    def test_replans_every_f_steps(self):
        for f, n_plans in ((4, 4), (3, 6), (8, 2)):
            config = PlannerConfig(horizon=HORIZON, f=f, N=N)
            record = run_episode(self.spec, self.sampler, config, BudgetSchedule.constant(2.0, 16), seed=0)
            self.assertEqual(len(record.plans), n_plans)
            self.assertEqual([p.step for p in record.plans], list(range(0, 16, f)))
            self.assertEqual(sum(p.executed_steps for p in record.plans), 16)
            self.assertEqual(len(record.states), 17)

    def test_costs_are_accounted_per_segment(self):
        schedule = BudgetSchedule.parse('0:1,8:2', 16)
        config = PlannerConfig(horizon=HORIZON, f=4, N=N)
        record = run_episode(self.spec, self.sampler, config, schedule, seed=1)
        assert_allclose(record.segment_costs, schedule.totals(record.costs))
        self.assertAlmostEqual(record.total_cost, sum(record.costs))
        self.assertAlmostEqual(record.total_reward, sum(p.realized_reward for p in record.plans))
        self.assertEqual([p.active_limit for p in record.plans], [1.0, 1.0, 2.0, 2.0])

    def test_decrement_and_static_budgets(self):
        schedule = BudgetSchedule.constant(3.0, 16)
        decrement = run_episode(self.spec, self.sampler, PlannerConfig(horizon=HORIZON, f=4, N=N), schedule, seed=2)
        spent = 0.0
        for plan in decrement.plans:
            self.assertAlmostEqual(plan.remaining_budget, max(0.0, 3.0 - spent))
            spent += plan.realized_cost
        static = run_episode(self.spec, self.sampler, PlannerConfig(horizon=HORIZON, f=4, N=N, mode='static'),
                             schedule, seed=2)
        self.assertTrue(all(plan.remaining_budget == 3.0 for plan in static.plans))

    def test_executed_actions_are_in_bounds(self):
        record = run_episode(self.spec, self.sampler, PlannerConfig(horizon=HORIZON, f=4, N=N),
                             BudgetSchedule.constant(2.0, 16), seed=3)
        actions = np.array(record.actions)
        self.assertTrue(np.all(actions >= self.spec.action_low[0]))
        self.assertTrue(np.all(actions <= self.spec.action_high[0]))
        self.assertTrue(env.replay(self.spec, env.Episode(
            env_id=self.spec.env_id, states=np.array(record.states), actions=actions,
            rewards=np.array(record.rewards), costs=np.array(record.costs))))

    def test_same_seed_same_episode(self):
        config = PlannerConfig(horizon=HORIZON, f=4, N=N)
        schedule = BudgetSchedule.constant(2.0, 16)
        a = run_episode(self.spec, self.sampler, config, schedule, seed=4)
        b = run_episode(self.spec, self.sampler, config, schedule, seed=4)
        self.assertEqual(a.actions, b.actions)

    def test_dimension_mismatch_rejected(self):
        with self.assertRaises(ShapeError):
            run_episode(self.spec, self.sampler, PlannerConfig(horizon=4, f=2, N=N), None, seed=0)
        point = env.make_spec('PointHazard2D', episode_len=16)
        with self.assertRaises(ShapeError):
            run_episode(point, self.sampler, PlannerConfig(horizon=HORIZON, f=4, N=N), None, seed=0)

    def test_denoiser_without_statistics_rejected(self):
        bare = Denoiser.create(self.dataset.flat_dim, N, hidden=(8,))
        sampler = GuidedSampler('no_cg', bare, make_schedule(N), GuidanceConfig(lam=0.0))
        with self.assertRaises(ShapeError):
            run_episode(self.spec, sampler, PlannerConfig(horizon=HORIZON, f=4, N=N), None, seed=0)

    def test_missing_schedule_uses_configured_limit(self):
        config = PlannerConfig(horizon=HORIZON, f=4, N=N, limit=3.0)
        record = run_episode(self.spec, self.sampler, config, None, seed=0)
        self.assertEqual([(e.start, e.limit, e.horizon) for e in record.schedule], [(0, 3.0, 16)])
        self.assertEqual(record.plans[0].active_limit, 3.0)
        self.assertEqual(record.plans[0].remaining_budget, 3.0)

    def test_short_schedule_rejected(self):
        with self.assertRaises(PlannerError):
            run_episode(self.spec, self.sampler, PlannerConfig(horizon=HORIZON, f=4, N=N),
                        BudgetSchedule.constant(2.0, 8), seed=0)


class MetricsTests(SimpleTestCase):
    reference = ReturnReference(r_rand=1.0, r_best=5.0)

    def test_normalization(self):
        metrics = normalized_metrics([_record(3.0, 2.0), _record(5.0, 6.0)], self.reference, l=8.0)
        self.assertEqual(metrics.n_episodes, 2)
        self.assertAlmostEqual(metrics.normalized_reward, 0.75)
        self.assertAlmostEqual(metrics.normalized_cost, 0.5)
        self.assertAlmostEqual(metrics.return_stderr, 1.0)
        self.assertFalse(metrics.cost_is_raw)

    def test_zero_limit_reports_raw_cost(self):
        metrics = normalized_metrics([_record(3.0, 2.0)], self.reference, l=0.0)
        self.assertTrue(metrics.cost_is_raw)
        self.assertEqual(metrics.normalized_cost, 2.0)
        self.assertEqual(metrics.cost_stderr, 0.0)

    def test_empty_records_rejected(self):
        with self.assertRaises(PlannerError):
            normalized_metrics([], self.reference, l=1.0)


class RecordFileTests(SimpleTestCase):
    def test_write_read(self):
        records = [_record(1.25, 0.0), _record(2.5, 3.0)]
        with tempfile.TemporaryDirectory() as tmp:
            path = write_records(records, Path(tmp) / 'episodes.jsonl')
            self.assertEqual(len(path.read_text().splitlines()), 2)
            self.assertEqual(read_records(path), records)


class EpisodeRecordSchemaDocTests(SimpleTestCase):
    def test_documented_fields_match_model(self):
        path = Path(__file__).resolve().parents[2] / 'docs' / 'episode_record.schema.json'
        schema = json.loads(path.read_text(encoding='utf-8'))
        self.assertEqual(set(schema['properties']), set(EpisodeRecord.model_fields))
        self.assertEqual(set(schema['required']), set(EpisodeRecord.model_fields))
        plan = schema['properties']['plans']['items']
        self.assertEqual(set(plan['properties']), set(PlanLog.model_fields))
