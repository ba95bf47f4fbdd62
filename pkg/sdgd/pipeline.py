"""
Bodies of the `sdgd` management command: data generation, training,
evaluation, sweeps, ablations and diagnostics. Each function takes a
validated RunConfig and writes its artifacts through a ResultWriter.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings

from . import __version__, env
from .dataset import OfflineDataset, check_label_separation, load_dataset, r_us_bound, save_dataset
from .diagnostics import (
    DynamicsModel,
    coupled_drift_experiment,
    cost_classifier_correlation,
    estimate_alignment,
    rollout_error_experiment,
    train_dynamics_model,
)
from .diffusion import Denoiser, make_schedule, train_denoiser
from .exceptions import ConfigError, DatasetError
from .guidance import (
    LAMBDA_GRID,
    VARIANTS,
    W_GRID,
    GuidanceConfig,
    GuidedSampler,
    NoisyRegressor,
    train_cost_model,
    train_return_denoiser,
    train_reward_model,
)
from .planner import (
    BudgetSchedule,
    ReturnReference,
    normalized_metrics,
    run_episode,
    write_records,
)
from .reporting import ResultWriter, config_hash, file_sha256
from .runconfig import RunConfig
from .schemas import EpisodeRecord, NormalizedMetrics, SweepRow

logger = logging.getLogger(__name__)

SWEEP_AXES = ('limit', 'lambda-w', 'f')
DIAGNOSTICS = ('drift', 'alignment', 'correlation', 'rollout')
DEFAULT_LIMITS = (2.0, 8.0, 16.0)
DEFAULT_F_VALUES = (0, 2, 4, 8, 16, 32)

CHECKPOINTS = {
    'denoiser': 'denoiser.sdgdnn',
    'reward_ftr': 'reward_ftr.sdgdnn',
    'reward_raw': 'reward_raw.sdgdnn',
    'cost': 'cost.sdgdnn',
    'dynamics': 'dynamics.sdgdnn',
    'return_denoiser': 'return_denoiser.sdgdnn',
}
MANIFEST = 'manifest.json'
MIN_RANKING_AUC = 0.95


def code_version() -> str:
    return settings.SDGD_CODE_VERSION or __version__


def result_writer(config: RunConfig, out_dir) -> ResultWriter:
    return ResultWriter(out_dir, config_hash(config), config.seed_value, code_version())


def _policy_counts(mix: Dict[str, float], n: int) -> List[Tuple[str, int]]:
    """Largest-remainder split of n episodes over the policy mix, in POLICY_IDS order."""
    names = [p for p in ('safe', 'greedy', 'random') if p in mix]
    raw = [mix[p] * n for p in names]
    counts = [int(np.floor(r)) for r in raw]
    remainders = sorted(range(len(names)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in remainders[:n - sum(counts)]:
        counts[i] += 1
    return list(zip(names, counts))


# gen-data

def gen_data(config: RunConfig, out_path) -> dict:
    spec = config.env_spec()
    seeds = np.random.SeedSequence(config.seed_value).generate_state(config.data.n_episodes)
    episodes, k = [], 0
    for policy_id, count in _policy_counts(config.data.policy_mix, config.data.n_episodes):
        for _ in range(count):
            episodes.append(env.rollout(spec, policy_id, int(seeds[k]), action_noise=config.data.action_noise))
            k += 1
        logger.info(f"Rolled {count} '{policy_id}' episodes")
    path = save_dataset(out_path, spec, episodes)

    dataset = OfflineDataset(spec, episodes, horizon=config.data.L, stride=config.data.stride)
    stats = dataset.stats
    summary = {
        'path': str(path),
        'n_episodes': len(episodes),
        'n_segments': len(dataset),
        'r_min': stats.r_min,
        'r_max': stats.r_max,
        'c_max_seg': stats.c_max_seg,
        'r_us_bound': r_us_bound(stats, dataset.gamma, dataset.horizon),
        'r_us_auto': dataset.default_r_us(),
        'sha256': file_sha256(path),
    }
    logger.info(f"✓ Dataset stats: r_min={stats.r_min:g} r_max={stats.r_max:g} c_max_seg={stats.c_max_seg:g} "
                f"r_us bound={summary['r_us_bound']:g} (auto r_us={summary['r_us_auto']:g})")
    return summary


# train

def _load_offline(config: RunConfig, dataset_path) -> OfflineDataset:
    if dataset_path is None:
        raise DatasetError("No dataset given (pass --dataset)")
    path = Path(dataset_path)
    if not path.exists():
        raise DatasetError(f"Dataset {path} does not exist")
    loaded = load_dataset(path, expected_spec=config.env_spec())
    return OfflineDataset(loaded.spec, loaded.episodes, horizon=config.data.L, stride=config.data.stride,
                          gamma=loaded.gamma, gamma_c=loaded.gamma_c)


def _save_checkpoint(model, checkpoint_dir: Path, key: str) -> str:
    path = model.save(checkpoint_dir / CHECKPOINTS[key])
    digest = file_sha256(path)
    logger.info(f"Checkpoint {key}: {path} sha256={digest}")
    return digest


def _trace_rows(trace):
    return [(row.step, row.loss, row.smoothed_loss) for row in trace]


def train(config: RunConfig, dataset_path, out_dir, with_swapped: bool = False) -> dict:
    """Train every model the other commands load; returns the checkpoint manifest."""
    dataset = _load_offline(config, dataset_path)
    out_dir = Path(out_dir)
    writer = result_writer(config, out_dir)
    r_us = config.resolve_r_us(dataset)
    f = config.guidance.f
    if not check_label_separation(dataset, f, r_us):
        logger.warning(f"✗ r_us={r_us:g} does not separate prefix-infeasible from feasible segments at f={f}")

    dtc = config.denoiser_train_config()
    ctc = config.classifier_train_config()
    N = config.diffusion.N
    schedule = make_schedule(N)
    traces, digests = {}, {}

    denoiser, traces['denoiser'] = train_denoiser(dataset, dtc, N=N, horizon=dataset.horizon,
                                                  env_id=dataset.spec.env_id, stats=dataset.stats)
    digests['denoiser'] = _save_checkpoint(denoiser, out_dir, 'denoiser')
    ftr, report = train_reward_model(dataset, schedule, 'ftr', ctc, f, r_us)
    traces['reward_ftr'] = report.trace
    ftr_auc = report.ranking_auc
    if ftr_auc is not None and ftr_auc <= MIN_RANKING_AUC:
        logger.warning(f"✗ FTR reward model ranks only {ftr_auc:.3f} of held-out feasible/infeasible pairs correctly")
    digests['reward_ftr'] = _save_checkpoint(ftr, out_dir, 'reward_ftr')
    raw, report = train_reward_model(dataset, schedule, 'raw', ctc, f)
    traces['reward_raw'] = report.trace
    digests['reward_raw'] = _save_checkpoint(raw, out_dir, 'reward_raw')
    cost, report = train_cost_model(dataset, schedule, ctc)
    traces['cost'] = report.trace
    digests['cost'] = _save_checkpoint(cost, out_dir, 'cost')
    dynamics, traces['dynamics'] = train_dynamics_model(dataset, ctc)
    digests['dynamics'] = _save_checkpoint(dynamics, out_dir, 'dynamics')
    if with_swapped:
        return_denoiser, traces['return_denoiser'] = train_return_denoiser(dataset, dtc, N, f, r_us)
        digests['return_denoiser'] = _save_checkpoint(return_denoiser, out_dir, 'return_denoiser')

    for name, trace in traces.items():
        writer.csv(f'loss_{name}', ('step', 'loss', 'smoothed_loss'), _trace_rows(trace))

    manifest = {
        'env_id': dataset.spec.env_id,
        'L': dataset.horizon,
        'N': N,
        'f': f,
        'r_us': r_us,
        'r_best': dataset.best_episode_return,
        'reward_ftr_auc': ftr_auc,
        'dataset': str(Path(dataset_path)),
        'dataset_sha256': file_sha256(dataset_path),
        'checkpoints': digests,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"✓ Training complete, manifest at {out_dir / MANIFEST}")
    return manifest


# Loading trained models

class TrainedModels:
    """Checkpoints of one `train` run."""

    def __init__(self, checkpoint_dir):
        self.dir = Path(checkpoint_dir)
        manifest_path = self.dir / MANIFEST
        if not manifest_path.exists():
            raise DatasetError(f"No trained checkpoints in {self.dir} (missing {MANIFEST})")
        self.manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
        self.denoiser = Denoiser.load(self.path('denoiser'))
        self.reward_ftr = NoisyRegressor.load(self.path('reward_ftr'))
        self.reward_raw = NoisyRegressor.load(self.path('reward_raw'))
        self.cost = NoisyRegressor.load(self.path('cost'))
        self.schedule = make_schedule(self.denoiser.N)
        self._dynamics = None
        self._return_denoiser = None

    def path(self, key: str) -> Path:
        path = self.dir / CHECKPOINTS[key]
        if not path.exists():
            raise DatasetError(f"Missing checkpoint {path}")
        return path

    @property
    def r_us(self) -> float:
        return float(self.manifest['r_us'])

    @property
    def has_return_denoiser(self) -> bool:
        return (self.dir / CHECKPOINTS['return_denoiser']).exists() or self._return_denoiser is not None

    @property
    def return_denoiser(self) -> Denoiser:
        if self._return_denoiser is None:
            self._return_denoiser = Denoiser.load(self.path('return_denoiser'))
        return self._return_denoiser

    @return_denoiser.setter
    def return_denoiser(self, value: Denoiser):
        self._return_denoiser = value

    @property
    def dynamics(self) -> DynamicsModel:
        if self._dynamics is None:
            self._dynamics = DynamicsModel.load(self.path('dynamics'))
        return self._dynamics

    def denoiser_checksum(self) -> str:
        return file_sha256(self.path('denoiser'))

    def sampler(self, variant: str, guidance: GuidanceConfig, reward_model: Optional[NoisyRegressor] = None,
                target_return: float = 1.0) -> GuidedSampler:
        return GuidedSampler(
            variant, self.denoiser, self.schedule, guidance,
            reward_model=reward_model or self.reward_ftr, cost_model=self.cost,
            return_denoiser=self.return_denoiser if variant == 'swapped' else None,
            target_return=target_return,
        )


def _reference(config: RunConfig, models: TrainedModels) -> ReturnReference:
    spec = config.env_spec()
    r_rand = env.reference_return(spec, settings.SDGD_REFERENCE_EPISODES, seed=config.seed_value)
    return ReturnReference(r_rand=r_rand, r_best=float(models.manifest['r_best']))


def _episode_seeds(config: RunConfig, eval_seed: int) -> List[int]:
    sequence = np.random.SeedSequence([config.seed_value, eval_seed])
    return [int(s) for s in sequence.generate_state(config.planner.episodes)]


def _normalizing_limit(schedule: BudgetSchedule) -> float:
    # the whole-episode allowance; equals l for a constant schedule
    return float(sum(entry.limit for entry in schedule.entries))


def run_evaluation(config: RunConfig, sampler: GuidedSampler, schedule: BudgetSchedule,
                   reference: ReturnReference) -> Tuple[List[EpisodeRecord], List[NormalizedMetrics]]:
    """`planner.episodes` episodes for each of `planner.seeds` evaluation seeds."""
    spec = config.env_spec()
    planner_config = config.planner_config(sampler.config)
    limit = _normalizing_limit(schedule)
    records, per_seed = [], []
    for eval_seed in range(config.planner.seeds):
        seed_records = [run_episode(spec, sampler, planner_config, schedule, episode_seed)
                        for episode_seed in _episode_seeds(config, eval_seed)]
        metrics = normalized_metrics(seed_records, reference, limit)
        logger.info(f"{sampler.variant} seed {eval_seed}: normalized reward={metrics.normalized_reward:.3f} "
                    f"normalized cost={metrics.normalized_cost:.3f}")
        records.extend(seed_records)
        per_seed.append(metrics)
    return records, per_seed


def _metrics_rows(per_seed: Sequence[NormalizedMetrics], overall: NormalizedMetrics):
    header = ('seed', 'n_episodes', 'normalized_reward', 'normalized_cost', 'mean_return', 'mean_cost',
              'return_stderr', 'cost_stderr', 'cost_is_raw')
    rows = []
    for label, m in [*enumerate(per_seed), ('all', overall)]:
        rows.append((label, m.n_episodes, m.normalized_reward, m.normalized_cost, m.mean_return, m.mean_cost,
                     m.return_stderr, m.cost_stderr, m.cost_is_raw))
    return header, rows


def _segment_compliance(records: Sequence[EpisodeRecord]) -> float:
    checks = [cost <= entry.limit for r in records for cost, entry in zip(r.segment_costs, r.schedule)]
    return float(np.mean(checks)) if checks else 1.0


# eval

def evaluate(config: RunConfig, checkpoints, out_dir) -> NormalizedMetrics:
    models = TrainedModels(checkpoints)
    writer = result_writer(config, out_dir)
    guidance = config.guidance_config(r_us=models.r_us)
    sampler = models.sampler('sdgd', guidance)
    schedule = config.budget_schedule()
    reference = _reference(config, models)

    records, per_seed = run_evaluation(config, sampler, schedule, reference)
    overall = normalized_metrics(records, reference, _normalizing_limit(schedule))
    write_records(records, writer.path('episodes', 'jsonl'))
    header, rows = _metrics_rows(per_seed, overall)
    writer.csv('eval', header, rows)
    writer.json('eval_summary', {
        'overall': overall.model_dump(mode='json'),
        'per_seed': [m.model_dump(mode='json') for m in per_seed],
        'segment_compliance': _segment_compliance(records),
        'reference': reference.model_dump(mode='json'),
        'schedule': [e.model_dump(mode='json') for e in schedule.entries],
        'denoiser_sha256': models.denoiser_checksum(),
    })
    logger.info(f"✓ Evaluated {len(records)} episodes: normalized reward={overall.normalized_reward:.3f} "
                f"normalized cost={overall.normalized_cost:.3f}")
    return overall


# sweep

def _sweep_rows(axis: str, value: str, limit: float, sampler: GuidedSampler,
                per_seed: Sequence[NormalizedMetrics]) -> List[SweepRow]:
    return [SweepRow(axis=axis, value=value, limit=limit, lam=sampler.config.lam, w=sampler.config.w,
                     f=sampler.config.f, seed=seed, normalized_reward=m.normalized_reward,
                     normalized_cost=m.normalized_cost, mean_return=m.mean_return, mean_cost=m.mean_cost)
            for seed, m in enumerate(per_seed)]


def _f_reward_model(config: RunConfig, models: TrainedModels, f: int, dataset_path) -> NoisyRegressor:
    if f == models.manifest.get('f'):
        return models.reward_ftr
    dataset = _load_offline(config, dataset_path or models.manifest.get('dataset'))
    model, _ = train_reward_model(dataset, models.schedule, 'ftr', config.classifier_train_config(), f, models.r_us)
    model.save(models.dir / f'reward_f{f}.sdgdnn')
    return model


def sweep(config: RunConfig, checkpoints, axis: str, out_dir, values: Optional[Sequence[float]] = None,
          lambdas: Optional[Sequence[float]] = None, weights: Optional[Sequence[float]] = None,
          dataset_path=None) -> List[SweepRow]:
    """
    Re-evaluate one trained model along an axis. The limit and lambda-w
    axes never retrain; the f axis retrains only the reward model (f=0 uses
    the raw-return reward model).
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis: '{axis}' is not one of {SWEEP_AXES}")
    for name, given in (('values', values), ('lambdas', lambdas), ('weights', weights)):
        negative = [v for v in (given or ()) if v < 0]
        if negative:
            raise ConfigError(f"sweep.{name}: {negative} must be >= 0")
    models = TrainedModels(checkpoints)
    writer = result_writer(config, out_dir)
    reference = _reference(config, models)
    limit = config.planner.limit
    rows: List[SweepRow] = []

    if axis == 'limit':
        for value in (values or DEFAULT_LIMITS):
            logger.info(f"Limit {value:g}: denoiser sha256={models.denoiser_checksum()}")
            sampler = models.sampler('sdgd', config.guidance_config(r_us=models.r_us))
            _, per_seed = run_evaluation(config, sampler, config.budget_schedule(float(value)), reference)
            rows += _sweep_rows(axis, f'{float(value):g}', float(value), sampler, per_seed)
    elif axis == 'lambda-w':
        for lam in (lambdas or LAMBDA_GRID):
            for w in (weights or W_GRID):
                sampler = models.sampler('sdgd', config.guidance_config(r_us=models.r_us, lam=lam, w=w))
                _, per_seed = run_evaluation(config, sampler, config.budget_schedule(limit), reference)
                rows += _sweep_rows(axis, f'lambda={lam:g};w={w:g}', limit, sampler, per_seed)
    else:
        f_values = [int(v) for v in (values or DEFAULT_F_VALUES) if int(v) <= config.data.L]
        for f in f_values:
            if f == 0:
                guidance = config.guidance_config(r_us=models.r_us)
                sampler = models.sampler('sdgd', guidance, reward_model=models.reward_raw)
            else:
                guidance = config.guidance_config(r_us=models.r_us, f=f)
                sampler = models.sampler('sdgd', guidance, reward_model=_f_reward_model(config, models, f,
                                                                                        dataset_path))
            _, per_seed = run_evaluation(config, sampler, config.budget_schedule(limit), reference)
            rows += _sweep_rows(axis, 'raw' if f == 0 else str(f), limit, sampler, per_seed)

    writer.csv(f'sweep_{axis}', SweepRow.header(), [r.row() for r in rows],
               extra={'axis': axis, 'denoiser_sha256': models.denoiser_checksum()})
    return rows


# ablate

def ablate(config: RunConfig, checkpoints, out_dir, dataset_path=None) -> List[SweepRow]:
    """Full SDGD, w/o CG, w/o CFG and the swapped baseline on the same evaluation seeds."""
    models = TrainedModels(checkpoints)
    if not models.has_return_denoiser:
        logger.info("No swapped-baseline checkpoint, training it now")
        dataset = _load_offline(config, dataset_path or models.manifest.get('dataset'))
        return_denoiser, _ = train_return_denoiser(dataset, config.denoiser_train_config(), config.diffusion.N,
                                                   config.guidance.f, models.r_us)
        return_denoiser.save(models.dir / CHECKPOINTS['return_denoiser'])
        models.return_denoiser = return_denoiser

    writer = result_writer(config, out_dir)
    reference = _reference(config, models)
    limit = config.planner.limit
    guidance = config.guidance_config(r_us=models.r_us)
    rows: List[SweepRow] = []
    for variant in VARIANTS:
        sampler = models.sampler(variant, guidance, target_return=config.planner.target_return)
        _, per_seed = run_evaluation(config, sampler, config.budget_schedule(limit), reference)
        rows += _sweep_rows('variant', variant, limit, sampler, per_seed)
    writer.csv('ablate', SweepRow.header(), [r.row() for r in rows])
    return rows


# diagnose

def diagnose(config: RunConfig, checkpoints, which: str, out_dir, dataset_path=None):
    if which not in DIAGNOSTICS:
        raise ConfigError(f"diagnose.which: '{which}' is not one of {DIAGNOSTICS}")
    models = TrainedModels(checkpoints)
    writer = result_writer(config, out_dir)
    spec = config.env_spec()
    d = config.diagnostics
    guidance = config.guidance_config(r_us=models.r_us)
    planner_config = config.planner_config(guidance)
    cost_sampler = models.sampler('no_cg', guidance)
    seed = config.seed_value

    if which == 'drift':
        report = coupled_drift_experiment(
            spec, cost_sampler,
            models.sampler('sdgd', guidance, reward_model=models.reward_raw),
            models.sampler('sdgd', guidance, reward_model=models.reward_ftr),
            planner_config, d.limit, d.n_trials, seed)
        rows = zip(range(report.n_trials), report.cost_conditioned, report.raw_guided, report.ftr_guided,
                   report.delta_raw, report.delta_ftr)
        writer.csv('drift', ('trial', 'cost_conditioned', 'raw_guided', 'ftr_guided', 'delta_raw', 'delta_ftr'),
                   rows)
    elif which == 'alignment':
        report = estimate_alignment(spec, cost_sampler, planner_config, d.limit, d.n_trials, seed)
        writer.csv('alignment', ('trial', 'A_f'), enumerate(report.totals))
    elif which == 'correlation':
        dataset = _load_offline(config, dataset_path or models.manifest.get('dataset'))
        report = cost_classifier_correlation(models.cost, dataset, models.schedule, seed=seed)
        writer.csv('correlation', ('s', 'pearson_r'), zip(report.steps, report.pearson_r))
    else:
        dataset = _load_offline(config, dataset_path or models.manifest.get('dataset'))
        report = rollout_error_experiment(spec, models.dynamics, cost_sampler, dataset, d.horizons,
                                          planner_config, d.limit, seed=seed)
        writer.csv('rollout', ('horizon', 'position', 'autoregressive_error', 'joint_error'),
                   [(r.horizon, r.position, r.autoregressive_error, r.joint_error) for r in report.rows])
    writer.json(f'{which}_summary', report)
    return report
