import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from sdgd.exceptions import ConfigError
from sdgd.runconfig import RunConfig, load_run_config, parse_run_config


class DefaultsTests(SimpleTestCase):
    def test_empty_file_gives_defaults(self):
        config = parse_run_config('')
        self.assertEqual(config, RunConfig())
        self.assertEqual((config.env.env_id, config.env.T_ep), ('ChainVel1D', 64))
        self.assertEqual((config.data.L, config.diffusion.N, config.guidance.f), (32, 100, 8))
        self.assertEqual((config.guidance.w, config.guidance.lam, config.guidance.r_us), (4.0, 0.04, 'auto'))
        self.assertEqual(config.data.policy_mix, {'safe': 0.4, 'greedy': 0.3, 'random': 0.3})

    def test_derived_configs(self):
        config = parse_run_config('[seed]\nvalue = 7\n[diffusion]\nhidden = 64,64\n[planner]\nlimit = 3.5\n')
        self.assertEqual(config.denoiser_train_config().hidden, (64, 64))
        self.assertEqual(config.denoiser_train_config().seed, 7)
        self.assertEqual(config.classifier_train_config().p_uncond, 0.0)
        guidance = config.guidance_config(r_us=-5.0, lam=0.0)
        self.assertEqual((guidance.lam, guidance.r_us, guidance.w), (0.0, -5.0, 4.0))
        planner = config.planner_config(guidance)
        self.assertEqual((planner.horizon, planner.f, planner.N, planner.seed), (32, 8, 100, 7))
        self.assertEqual(planner.limit, 3.5)

    def test_seed_override(self):
        config = parse_run_config('[seed]\nvalue = 3\n')
        self.assertEqual(config.with_seed(None).seed_value, 3)
        self.assertEqual(config.with_seed(11).seed_value, 11)

    def test_budget_schedule(self):
        config = parse_run_config('[planner]\nlimit = 8\nschedule = 0:2,32:16\n')
        self.assertEqual([e.limit for e in config.budget_schedule().entries], [2.0, 16.0])
        self.assertEqual([e.limit for e in config.budget_schedule(limit=4.0).entries], [4.0])


class ParsingTests(SimpleTestCase):
    def test_values_are_parsed(self):
        config = parse_run_config(
            '[env]\nenv_id = PointHazard2D\n'
            '[data]\npolicy_mix = safe:0.5, random:0.5\nL = 16\n'
            '[guidance]\nlambda = 0.08\nr_us = -3.5\nf = 4\n'
            '[diagnostics]\nhorizons = 0,8,16\n'
        )
        self.assertEqual(config.env.env_id, 'PointHazard2D')
        self.assertEqual(config.data.policy_mix, {'safe': 0.5, 'random': 0.5})
        self.assertEqual((config.guidance.lam, config.guidance.r_us), (0.08, -3.5))
        self.assertEqual(config.diagnostics.horizons, (0, 8, 16))

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_run_config('[guidance]\nweight = 2\n')
        self.assertTrue(any(p.startswith('guidance.weight') for p in ctx.exception.problems))

    def test_unknown_section_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_run_config('[optimizer]\nlr = 1\n')
        self.assertEqual(ctx.exception.problems, ['optimizer: unknown section'])

    def test_invalid_values_rejected(self):
        cases = [
            '[guidance]\nf = 40\n',
            '[data]\nL = 80\n',
            '[data]\npolicy_mix = safe:0.5,greedy:0.2\n',
            '[data]\npolicy_mix = safe:0.5,clever:0.5\n',
            '[guidance]\nr_us = 0\n',
            '[guidance]\nr_us = 2.5\n',
            '[guidance]\nlambda = -1\n',
            '[diffusion]\np_uncond = 1.5\n',
            '[planner]\nschedule = 4:2\n',
            '[planner]\nschedule = 0:2,8:-1\n',
            '[diagnostics]\nn_trials = 1\n',
            '[diagnostics]\nhorizons = 4,64\n',
            '[env]\nenv_id = CartPole\n',
        ]
        for text in cases:
            with self.subTest(text=text), self.assertRaises(ConfigError):
                parse_run_config(text)

    def test_syntax_error_is_config_error(self):
        with self.assertRaises(ConfigError):
            parse_run_config('not an ini file')

    def test_load_missing_file(self):
        with self.assertRaises(ConfigError):
            load_run_config('/nonexistent/run.ini')

    def test_load_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.ini'
            path.write_text('[planner]\nepisodes = 5\n', encoding='utf-8')
            self.assertEqual(load_run_config(path).planner.episodes, 5)

    def test_shipped_example_config_loads(self):
        path = Path(__file__).resolve().parents[2] / 'configs' / 'chainvel.ini'
        config = load_run_config(path)
        self.assertEqual(config.env.env_id, 'ChainVel1D')
