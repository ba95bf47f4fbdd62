"""
Diagnostic experiments on a trained system: reward-induced cost drift
between coupled samplers, alignment of the cost and prefix-infeasibility
surrogate gradients, cost-model correlation across diffusion steps and
autoregressive versus joint rollout error.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit
from scipy.stats import binomtest, pearsonr, spearmanr

from . import env
from .approx import NetSpec, Network, read_sidecar
from .dataset import FlatNormalizer, OfflineDataset, Segment
from .diffusion import TraceRow, TrainConfig, draw_sample_noise, predict_x0, q_sample, run_training, sample, sample_chain
from .exceptions import DatasetFormatError, DiagnosticsError
from .guidance import HOLDOUT_FRACTION, GuidedSampler, NoisyRegressor
from .planner import PlannerConfig, plan_request
from .schemas import (
    AlignmentReport,
    CorrelationReport,
    DriftReport,
    RolloutErrorReport,
    RolloutErrorRow,
)

logger = logging.getLogger(__name__)

PREFIX_SHARPNESS = 10.0
PREFIX_MIDPOINT = 0.5


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, trial]))


# Coupled drift

def _plan_cost(env_spec: env.EnvSpec, sampler: GuidedSampler, config: PlannerConfig,
               start_state, limit: float, noise) -> float:
    """True cost of a sampled plan, measured by re-simulating its actions from the pinned start."""
    request = plan_request(sampler, config, env_spec, start_state, limit, seed=0, noise=noise)
    flat = sample(sampler.schedule, sampler.sampling_denoiser, request)[0]
    plan = Segment.from_flat(flat, env_spec.state_dim, env_spec.action_dim)
    return env.simulate_actions(env_spec, start_state, plan.actions).total_cost


def coupled_drift_experiment(env_spec: env.EnvSpec, cost_sampler: GuidedSampler, raw_sampler: GuidedSampler,
                             ftr_sampler: GuidedSampler, config: PlannerConfig, limit: float,
                             n_trials: int, seed: int = 0) -> DriftReport:
    """
    Run the cost-conditioned, raw-reward-guided and FTR-guided samplers on
    the same initial and per-step noise, and compare the cost each guided
    plan adds over the cost-conditioned one.

    Args:
        cost_sampler: lambda = 0 sampler (the reference path)
        raw_sampler: guided by a reward model trained on raw returns
        ftr_sampler: guided by a reward model trained on relabeled returns
        limit: raw cost limit all three condition on

    Returns:
        DriftReport with per-trial costs and the paired sign test of
        delta_raw - delta_ftr > 0.
    """
    if n_trials < 2:
        raise DiagnosticsError(f"The drift experiment needs at least 2 trials, got {n_trials}")
    dims = {s.sampling_denoiser.flat_dim for s in (cost_sampler, raw_sampler, ftr_sampler)}
    if len(dims) != 1:
        raise DiagnosticsError(f"Coupled samplers must share one flat dimension, got {sorted(dims)}")
    flat_dim = dims.pop()
    N = cost_sampler.schedule.N
    start = env.reset(env_spec, seed)

    c_ref, c_raw, c_ftr = [], [], []
    for trial in range(n_trials):
        noise = draw_sample_noise(N, 1, flat_dim, _trial_rng(seed, trial))
        c_ref.append(_plan_cost(env_spec, cost_sampler, config, start, limit, noise))
        c_raw.append(_plan_cost(env_spec, raw_sampler, config, start, limit, noise))
        c_ftr.append(_plan_cost(env_spec, ftr_sampler, config, start, limit, noise))
        logger.debug(f"Drift trial {trial}: C={c_ref[-1]:g} R={c_raw[-1]:g} R_hat={c_ftr[-1]:g}")

    c_ref, c_raw, c_ftr = np.array(c_ref), np.array(c_raw), np.array(c_ftr)
    delta_raw = c_raw - c_ref
    delta_ftr = c_ftr - c_ref
    paired = delta_raw - delta_ftr
    n_smaller = int(np.sum(paired > 0))
    n_larger = int(np.sum(paired < 0))
    if n_smaller + n_larger == 0:
        p_value = 1.0
    else:
        p_value = float(binomtest(n_smaller, n_smaller + n_larger, 0.5, alternative='greater').pvalue)

    report = DriftReport(
        n_trials=n_trials, seed=seed,
        cost_conditioned=c_ref.tolist(), raw_guided=c_raw.tolist(), ftr_guided=c_ftr.tolist(),
        delta_raw=delta_raw.tolist(), delta_ftr=delta_ftr.tolist(),
        mean_delta_raw=float(delta_raw.mean()), mean_delta_ftr=float(delta_ftr.mean()),
        paired_mean=float(paired.mean()),
        paired_stderr=float(np.std(paired, ddof=1) / np.sqrt(n_trials)),
        n_ftr_smaller=n_smaller, n_ftr_larger=n_larger, sign_test_p=p_value,
    )
    logger.info(f"✓ Drift: mean dC_R={report.mean_delta_raw:.4f} mean dC_R_hat={report.mean_delta_ftr:.4f} "
                f"sign test p={p_value:.4g} ({n_smaller} smaller / {n_larger} larger)")
    return report


# Alignment

class SurrogateTerms(BaseModel):
    """C~ and h~_f of a decoded segment with their gradients w.r.t. the normalized flat vector."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    c_tilde: float
    h_tilde: float
    grad_c: np.ndarray
    grad_h: np.ndarray

    @property
    def alignment(self) -> float:
        return float(self.grad_c @ self.grad_h)


def surrogate_terms(env_spec: env.EnvSpec, normalizer: FlatNormalizer, horizon: int, f: int, x) -> SurrogateTerms:
    """
    C~(x) = sum_t smooth_cost(state_t) over the segment and
    h~_f(x) = expit(10 * sum_{t<f} smooth_cost(state_t) - 5), states decoded
    from the normalized flat vector x.
    """
    if not 1 <= f <= horizon:
        raise DiagnosticsError(f"Feasible length f={f} outside [1, {horizon}]")
    x = np.asarray(x, dtype=float).reshape(-1)
    sd, width = env_spec.state_dim, env_spec.state_dim + env_spec.action_dim
    flat = normalizer.denormalize(x)

    grad_flat = np.zeros_like(flat)
    costs = np.zeros(horizon)
    for t in range(horizon):
        state = flat[t * width:t * width + sd]
        costs[t] = env.smooth_cost(env_spec, state)
        grad_flat[t * width:t * width + sd] = env.smooth_cost_grad(env_spec, state)

    prefix_grad = grad_flat.copy()
    prefix_grad[f * width:] = 0.0
    h = float(expit(PREFIX_SHARPNESS * (costs[:f].sum() - PREFIX_MIDPOINT)))
    dh = PREFIX_SHARPNESS * h * (1.0 - h)
    # chain rule through denormalize: d flat / d x = std
    return SurrogateTerms(c_tilde=float(costs.sum()), h_tilde=h,
                          grad_c=grad_flat * normalizer.std, grad_h=dh * prefix_grad * normalizer.std)


def estimate_alignment(env_spec: env.EnvSpec, sampler: GuidedSampler, config: PlannerConfig, limit: float,
                       n_trials: int, seed: int = 0) -> AlignmentReport:
    """
    Along cost-conditioned reverse chains, accumulate
    a_s = <grad C~(x0_hat), grad h~_f(x0_hat)> with x0_hat predicted from
    the conditional epsilon at each step; A_f is the unweighted sum over s.
    """
    denoiser = sampler.sampling_denoiser
    schedule = sampler.schedule
    normalizer = denoiser.stats.flat_normalizer(config.horizon)
    start = env.reset(env_spec, seed)
    steps = list(range(schedule.N, 0, -1))

    per_step, totals = [], []
    for trial in range(n_trials):
        noise = draw_sample_noise(schedule.N, 1, denoiser.flat_dim, _trial_rng(seed, trial))
        request = plan_request(sampler, config, env_spec, start, limit, seed=0, noise=noise)
        chain = sample_chain(schedule, denoiser, request)
        values = []
        for x_s, s in zip(chain[:-1], steps):
            eps = denoiser.predict_eps(x_s, s, request.condition)
            x0_hat = predict_x0(schedule, x_s, s, eps)[0]
            values.append(surrogate_terms(env_spec, normalizer, config.horizon, config.f, x0_hat).alignment)
        per_step.append(values)
        totals.append(float(np.sum(values)))

    totals_arr = np.array(totals)
    report = AlignmentReport(
        n_trials=n_trials, seed=seed, steps=steps, per_step=per_step, totals=totals,
        fraction_positive=float(np.mean(totals_arr > 0)) if n_trials else 0.0,
        mean_total=float(totals_arr.mean()) if n_trials else 0.0,
    )
    logger.info(f"✓ Alignment: A_f > 0 in {report.fraction_positive:.0%} of {n_trials} trials")
    return report


# Cost-model correlation

def _safe_pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    if len(a) < 2 or np.std(a) == 0.0 or np.std(b) == 0.0:
        return None
    return float(pearsonr(a, b).statistic)


def cost_classifier_correlation(cost_model: NoisyRegressor, dataset: OfflineDataset, schedule,
                                steps: Optional[Sequence[int]] = None, seed: int = 0) -> CorrelationReport:
    """Pearson r between predicted and true segment cost on held-out segments, per diffusion step."""
    _, holdout = dataset.split(HOLDOUT_FRACTION, seed)
    if len(holdout) < 2:
        holdout = np.arange(len(dataset))
    x0 = dataset.x0[holdout]
    truth = dataset.segment_costs[holdout]
    steps = list(range(1, schedule.N + 1)) if steps is None else [int(s) for s in steps]
    rng = np.random.default_rng(seed)

    correlations: List[Optional[float]] = []
    for s in steps:
        x_s = q_sample(schedule, x0, s, rng.standard_normal(x0.shape))
        r = _safe_pearson(cost_model.predict(x_s, s), truth)
        if r is None:
            logger.warning(f"Cost correlation undefined at s={s} (zero variance)")
        correlations.append(r)

    valid = [(s, r) for s, r in zip(steps, correlations) if r is not None]
    trend = None
    if len(valid) >= 2 and len({r for _, r in valid}) > 1:
        trend = float(spearmanr([s for s, _ in valid], [r for _, r in valid]).statistic)
    logger.info(f"✓ Cost correlation over {len(steps)} steps, Spearman(r, s)={trend}")
    return CorrelationReport(steps=steps, pearson_r=correlations, spearman_r_vs_step=trend)


# Rollout error

class DynamicsModel:
    """One-step model: [state, action] -> next state, predicting the standardized state change."""

    def __init__(self, net: Network, state_dim: int, action_dim: int, input_mean, input_std, delta_mean, delta_std):
        self.net = net
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.input_mean = np.asarray(input_mean, dtype=float)
        self.input_std = np.asarray(input_std, dtype=float)
        self.delta_mean = np.asarray(delta_mean, dtype=float)
        self.delta_std = np.asarray(delta_std, dtype=float)

    def features(self, states, actions) -> np.ndarray:
        inputs = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return (inputs - self.input_mean) / self.input_std

    def predict(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        out = self.net.forward(self.features(states, actions))
        return states + out * self.delta_std + self.delta_mean

    def sidecar(self) -> dict:
        return {'kind': 'dynamics', 'state_dim': self.state_dim, 'action_dim': self.action_dim,
                'input_mean': self.input_mean.tolist(), 'input_std': self.input_std.tolist(),
                'delta_mean': self.delta_mean.tolist(), 'delta_std': self.delta_std.tolist()}

    def save(self, path):
        return self.net.save(path, sidecar=self.sidecar())

    @classmethod
    def load(cls, path) -> 'DynamicsModel':
        meta = read_sidecar(path)
        if meta.get('kind') != 'dynamics':
            raise DatasetFormatError(f"{path} is not a dynamics checkpoint")
        return cls(Network.load(path), meta['state_dim'], meta['action_dim'], meta['input_mean'],
                   meta['input_std'], meta['delta_mean'], meta['delta_std'])


class EnvDynamics:
    """The true environment step as a dynamics model."""

    def __init__(self, spec: env.EnvSpec):
        self.spec = spec

    def predict(self, states, actions) -> np.ndarray:
        s_low, s_high = np.asarray(self.spec.state_low), np.asarray(self.spec.state_high)
        states = np.clip(np.atleast_2d(states), s_low, s_high)
        return np.stack([env.step(self.spec, s, a).next_state for s, a in zip(states, np.atleast_2d(actions))])


def train_dynamics_model(dataset: OfflineDataset, config: TrainConfig) -> Tuple[DynamicsModel, List[TraceRow]]:
    states = np.concatenate([e.states[:-1] for e in dataset.episodes])
    actions = np.concatenate([e.actions for e in dataset.episodes])
    deltas = np.concatenate([e.states[1:] - e.states[:-1] for e in dataset.episodes])
    sd, ad = dataset.spec.state_dim, dataset.spec.action_dim
    inputs = np.concatenate([states, actions], axis=1)
    spec = NetSpec(input_dim=sd + ad, output_dim=sd, hidden=tuple(config.hidden))
    model = DynamicsModel(Network(spec, seed=config.seed), sd, ad,
                          inputs.mean(axis=0), np.maximum(inputs.std(axis=0), 1e-6),
                          deltas.mean(axis=0), np.maximum(deltas.std(axis=0), 1e-6))
    features = model.features(states, actions)
    targets = (deltas - model.delta_mean) / model.delta_std

    def loss_fn(params, rng):
        model.net.params = params
        idx = rng.integers(len(features), size=config.batch_size)
        residual = model.net.forward(features[idx]) - targets[idx]
        loss = float(np.mean(np.sum(residual ** 2, axis=1)))
        grads, _ = model.net.grad(features[idx], 2.0 * residual / len(idx))
        return loss, grads

    params, trace = run_training('dynamics', model.net.params, loss_fn, config, np.random.default_rng(config.seed))
    model.net.params = params
    logger.info(f"✓ Dynamics model trained on {len(features)} transitions")
    return model, trace


def _rollout_starts(dataset: OfflineDataset, max_steps: int, n_starts: int, seed: int):
    T = dataset.spec.episode_len
    candidates = [(e, t) for e in range(len(dataset.episodes)) for t in range(0, T - max_steps + 1)]
    if not candidates:
        raise DiagnosticsError(f"No episode start leaves room for {max_steps} steps")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_starts, len(candidates)), replace=False)
    return [candidates[i] for i in sorted(picks)]


def rollout_error_experiment(env_spec: env.EnvSpec, dynamics_model, sampler: GuidedSampler,
                             dataset: OfflineDataset, horizons: Sequence[int], config: PlannerConfig,
                             limit: float, n_starts: int = 32, seed: int = 0) -> RolloutErrorReport:
    """
    Mean L2 state error at horizon h for (a) rolling `dynamics_model`
    forward on dataset actions and (b) sampling a whole segment with the
    start state inpainted and replaying its actions in the environment.

    A segment holds states at positions 0..L-1, so h = L is compared at
    position L-1 for both methods.
    """
    L = config.horizon
    horizons = [int(h) for h in horizons]
    bad = [h for h in horizons if h < 0 or h > L]
    if bad:
        raise DiagnosticsError(f"Rollout horizons {bad} outside [0, L={L}]")
    positions = [min(h, L - 1) for h in horizons]
    starts = _rollout_starts(dataset, max(positions, default=0), n_starts, seed)

    auto_err = {p: [] for p in positions}
    joint_err = {p: [] for p in positions}
    for k, (e, t) in enumerate(starts):
        episode = dataset.episodes[e]
        state = episode.states[t][None, :]
        predicted = [state[0]]
        for j in range(max(positions, default=0)):
            state = dynamics_model.predict(state, episode.actions[t + j][None, :])
            predicted.append(state[0])
        for p in positions:
            auto_err[p].append(float(np.linalg.norm(predicted[p] - episode.states[t + p])))

        noise = draw_sample_noise(sampler.schedule.N, 1, sampler.sampling_denoiser.flat_dim, _trial_rng(seed, k))
        request = plan_request(sampler, config, env_spec, episode.states[t], limit, seed=0, noise=noise)
        flat = sample(sampler.schedule, sampler.sampling_denoiser, request)[0]
        plan = Segment.from_flat(flat, env_spec.state_dim, env_spec.action_dim)
        truth = env.simulate_actions(env_spec, episode.states[t], plan.actions)
        for p in positions:
            joint_err[p].append(float(np.linalg.norm(plan.states[p] - truth.states[p])))

    rows = [RolloutErrorRow(horizon=h, position=p, autoregressive_error=float(np.mean(auto_err[p])),
                            joint_error=float(np.mean(joint_err[p])))
            for h, p in zip(horizons, positions)]
    for row in rows:
        logger.info(f"Rollout error h={row.horizon}: autoregressive={row.autoregressive_error:.4f} "
                    f"joint={row.joint_error:.4f}")
    return RolloutErrorReport(rows=rows, n_starts=len(starts))
