"""
Management command wiring the SDGD pipeline:

    python manage.py sdgd gen-data  --config run.ini [--seed N] [--out DIR]
    python manage.py sdgd train     --config run.ini --dataset PATH [--with-swapped]
    python manage.py sdgd eval      --config run.ini --checkpoints DIR
    python manage.py sdgd sweep     --config run.ini --axis limit|lambda-w|f [--values ...]
    python manage.py sdgd ablate    --config run.ini --checkpoints DIR
    python manage.py sdgd diagnose  --config run.ini --which drift|alignment|correlation|rollout

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from pydantic import ValidationError

from sdgd import pipeline
from sdgd.exceptions import ConfigError, SDGDError
from sdgd.reporting import config_hash
from sdgd.runconfig import RunConfig, load_run_config


def _float_list(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f"'{text}' is not a comma-separated list of numbers")


class Command(BaseCommand):
    help = 'Generate data, train, evaluate and diagnose safe decoupled guidance planners'

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest='subcommand', required=True)

        def add(name, help_text):
            sub = subparsers.add_parser(name, help=help_text)
            sub.add_argument('--config', help='Run configuration INI file (defaults apply when omitted)')
            sub.add_argument('--seed', type=int, help='Overrides [seed] value')
            sub.add_argument('--out', help='Output directory (default: SDGD_OUTPUT_DIR)')
            return sub

        sub = add('gen-data', 'Roll behavior policies and write an offline dataset')
        sub.add_argument('--dataset', help='Dataset file to write')

        sub = add('train', 'Train denoiser, reward, cost and dynamics models')
        sub.add_argument('--dataset', help='Dataset file')
        sub.add_argument('--checkpoints', help='Checkpoint directory to write')
        sub.add_argument('--with-swapped', action='store_true', help='Also train the swapped baseline')

        sub = add('eval', 'Evaluate the SDGD planner')
        sub.add_argument('--checkpoints', help='Checkpoint directory')

        sub = add('sweep', 'Evaluate one trained model along an axis')
        sub.add_argument('--checkpoints', help='Checkpoint directory')
        sub.add_argument('--axis', required=True, choices=pipeline.SWEEP_AXES)
        sub.add_argument('--values', help='Comma-separated limits or f values')
        sub.add_argument('--lambdas', help='Comma-separated lambda grid')
        sub.add_argument('--weights', help='Comma-separated w grid')
        sub.add_argument('--dataset', help='Dataset file (f axis retrains the reward model)')

        sub = add('ablate', 'Compare SDGD, w/o CG, w/o CFG and the swapped baseline')
        sub.add_argument('--checkpoints', help='Checkpoint directory')
        sub.add_argument('--dataset', help='Dataset file (for on-demand swapped baseline training)')

        sub = add('diagnose', 'Run a diagnostics experiment')
        sub.add_argument('--checkpoints', help='Checkpoint directory')
        sub.add_argument('--which', required=True, choices=pipeline.DIAGNOSTICS)
        sub.add_argument('--dataset', help='Dataset file (correlation and rollout)')

    def handle(self, *args, **options):
        try:
            self._dispatch(options)
        except (ConfigError, ValidationError) as e:
            raise CommandError(f"✗ Invalid configuration: {e}", returncode=1)
        except (SDGDError, OSError) as e:
            raise CommandError(f"✗ {options['subcommand']} failed: {e}", returncode=2)

    def _dispatch(self, options):
        config = load_run_config(options['config']) if options.get('config') else RunConfig()
        config = config.with_seed(options.get('seed'))
        out = Path(options.get('out') or settings.SDGD_OUTPUT_DIR)
        cfg_hash = config_hash(config)
        dataset = options.get('dataset') or out / f'dataset-{cfg_hash}.sdgdds'
        checkpoints = options.get('checkpoints') or out / f'checkpoints-{cfg_hash}'
        command = options['subcommand']

        if command == 'gen-data':
            summary = pipeline.gen_data(config, dataset)
            self.stdout.write(json.dumps(summary, indent=2, sort_keys=True))
            self.stdout.write(self.style.SUCCESS(f"✓ Wrote dataset {summary['path']}"))
        elif command == 'train':
            manifest = pipeline.train(config, dataset, checkpoints, with_swapped=options['with_swapped'])
            self.stdout.write(self.style.SUCCESS(
                f"✓ Trained {len(manifest['checkpoints'])} models into {checkpoints} (r_us={manifest['r_us']:g})"))
        elif command == 'eval':
            metrics = pipeline.evaluate(config, checkpoints, out)
            self.stdout.write(self.style.SUCCESS(
                f"✓ normalized reward={metrics.normalized_reward:.3f} normalized cost={metrics.normalized_cost:.3f}"
                f"{' (raw cost, l=0)' if metrics.cost_is_raw else ''}"))
        elif command == 'sweep':
            rows = pipeline.sweep(
                config, checkpoints, options['axis'], out,
                values=_float_list(options['values']) if options.get('values') else None,
                lambdas=_float_list(options['lambdas']) if options.get('lambdas') else None,
                weights=_float_list(options['weights']) if options.get('weights') else None,
                dataset_path=options.get('dataset'))
            self.stdout.write(self.style.SUCCESS(f"✓ {options['axis']} sweep: {len(rows)} rows"))
        elif command == 'ablate':
            rows = pipeline.ablate(config, checkpoints, out, dataset_path=options.get('dataset'))
            for row in rows:
                self.stdout.write(f"{row.value:8s} seed {row.seed}: reward={row.normalized_reward:.3f} "
                                  f"cost={row.normalized_cost:.3f}")
        else:
            pipeline.diagnose(config, checkpoints, options['which'], out, dataset_path=options.get('dataset'))
            self.stdout.write(self.style.SUCCESS(f"✓ {options['which']} diagnostics written to {out}"))
