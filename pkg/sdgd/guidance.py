"""
Score composition for safe decoupled guidance.

Safety is handled by classifier-free guidance over cost limits,
    s_safe = (1 + w) s(x, l) - w s(x, null),
and return by the gradient of a reward model trained on FTR targets,
    s_sdgd = s_safe + lambda * grad_x R_phi(x, s).

Also holds the noisy-input regressors (reward and cost models), the
return-conditioned "swapped" baseline and GuidedSampler, which turns a
variant name plus trained models into sampler inputs for the planner.
"""
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.stats import mannwhitneyu

from .approx import NetSpec, Network, read_sidecar
from .dataset import (
    OfflineDataset,
    return_condition_scale,
    sample_return_conditioned_batch,
)
from .diffusion import (
    STEP_EMBEDDING_DIM,
    Denoiser,
    NoiseSchedule,
    TraceRow,
    TrainConfig,
    eps_to_score,
    q_sample,
    run_training,
    step_embedding,
    train_denoiser,
)
from .exceptions import DatasetFormatError, GuidanceError, ShapeError

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.01, 0.02, 0.04, 0.08)
W_GRID = (1.0, 2.0, 4.0, 8.0)
HOLDOUT_FRACTION = 0.1

Variant = Literal['sdgd', 'no_cg', 'no_cfg', 'swapped']
VARIANTS = ('sdgd', 'no_cg', 'no_cfg', 'swapped')


class GuidanceConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    w: float = 4.0
    lam: float = Field(default=0.04, alias='lambda')
    f: int = 8
    r_us: Optional[float] = None  # None resolves to 1.05 x r_us_bound of the dataset
    p_uncond: float = 0.25

    @field_validator('w', 'lam')
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError('must be >= 0')
        return value

    @field_validator('f')
    @classmethod
    def _feasible_length(cls, value):
        if value < 1:
            raise ValueError('must be >= 1')
        return value

    @field_validator('r_us')
    @classmethod
    def _penalty(cls, value):
        if value is not None and value >= 0:
            raise ValueError('must be < 0')
        return value

    @field_validator('p_uncond')
    @classmethod
    def _probability(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError('must be in [0, 1]')
        return value


def compose_cfg(s_cond, s_uncond, w: float) -> np.ndarray:
    return (1.0 + w) * s_cond - w * s_uncond


def compose_sdgd(s_safe, reward_grad, lam: float) -> np.ndarray:
    return s_safe + lam * reward_grad


def conditional_score(denoiser: Denoiser, schedule: NoiseSchedule, x_s, s: int, embedding) -> np.ndarray:
    return eps_to_score(schedule, denoiser.predict_eps(x_s, s, embedding), s)


def cfg_score(denoiser: Denoiser, schedule: NoiseSchedule, x_s, s: int, l, w: float) -> np.ndarray:
    """(1 + w) s(x, l) - w s(x, null) for a raw cost limit l."""
    s_cond = conditional_score(denoiser, schedule, x_s, s, denoiser.embed(l))
    s_uncond = conditional_score(denoiser, schedule, x_s, s, denoiser.embed(None))
    return compose_cfg(s_cond, s_uncond, w)


class NoisyRegressor:
    """
    Scalar regressor on noisy segments: input [x_s, step embedding].

    Targets are standardized for training; `predict` and `input_gradient`
    are in target units. `mode` is 'ftr' or 'raw' for reward models and
    'cost' for the cost model.
    """

    def __init__(self, net: Network, N: int, flat_dim: int, mode: str,
                 target_mean: float = 0.0, target_std: float = 1.0,
                 f: Optional[int] = None, r_us: Optional[float] = None):
        if net.spec.input_dim != flat_dim + STEP_EMBEDDING_DIM or net.spec.output_dim != 1:
            raise ShapeError(f"Regressor network must map {flat_dim + STEP_EMBEDDING_DIM} -> 1, "
                             f"got {net.spec.input_dim} -> {net.spec.output_dim}")
        self.net = net
        self.N = N
        self.flat_dim = flat_dim
        self.mode = mode
        self.target_mean = target_mean
        self.target_std = target_std
        self.f = f
        self.r_us = r_us

    @classmethod
    def create(cls, flat_dim: int, N: int, mode: str, hidden=(256, 256, 256), seed: int = 0, **kwargs):
        spec = NetSpec(input_dim=flat_dim + STEP_EMBEDDING_DIM, output_dim=1, hidden=tuple(hidden))
        return cls(Network(spec, seed=seed), N, flat_dim, mode, **kwargs)

    def features(self, x, s) -> np.ndarray:
        x = np.atleast_2d(x)
        s = np.broadcast_to(np.asarray(s), (len(x),))
        return np.concatenate([x, step_embedding(s, self.N)], axis=1)

    def predict(self, x, s) -> np.ndarray:
        return self.net.forward(self.features(x, s))[:, 0] * self.target_std + self.target_mean

    def input_gradient(self, x, s) -> np.ndarray:
        features = self.features(x, s)
        upstream = np.full((len(features), 1), self.target_std)
        _, input_grads = self.net.grad(features, upstream)
        return input_grads[:, :self.flat_dim]

    def sidecar(self) -> dict:
        return {'kind': 'regressor', 'mode': self.mode, 'N': self.N, 'flat_dim': self.flat_dim,
                'f': self.f, 'r_us': self.r_us,
                'target_mean': self.target_mean, 'target_std': self.target_std}

    def save(self, path) -> Path:
        return self.net.save(path, sidecar=self.sidecar())

    @classmethod
    def load(cls, path) -> 'NoisyRegressor':
        meta = read_sidecar(path)
        if meta.get('kind') != 'regressor':
            raise DatasetFormatError(f"{path} is not a regressor checkpoint")
        return cls(Network.load(path), meta['N'], meta['flat_dim'], meta['mode'],
                   target_mean=meta['target_mean'], target_std=meta['target_std'],
                   f=meta.get('f'), r_us=meta.get('r_us'))


RewardModel = NoisyRegressor
CostModel = NoisyRegressor


class RegressorReport(BaseModel):
    mode: str
    heldout_mse: float
    heldout_mse_by_step: Dict[int, float]
    trace: List[TraceRow]
    ranking_auc: Optional[float] = None  # FTR only: feasible above prefix-infeasible at s=1


def evaluate_regressor(model: NoisyRegressor, schedule: NoiseSchedule, x0: np.ndarray,
                       targets: np.ndarray, steps: Sequence[int], seed: int = 0) -> Dict[int, float]:
    """Held-out MSE (target units) at each requested diffusion step."""
    rng = np.random.default_rng(seed)
    result = {}
    for s in steps:
        x_s = q_sample(schedule, x0, int(s), rng.standard_normal(x0.shape))
        result[int(s)] = float(np.mean((model.predict(x_s, int(s)) - targets) ** 2))
    return result


def train_regressor(dataset: OfflineDataset, schedule: NoiseSchedule, targets: np.ndarray, mode: str,
                    config: TrainConfig, f: Optional[int] = None,
                    r_us: Optional[float] = None) -> Tuple[NoisyRegressor, RegressorReport]:
    """MSE regression of `targets` from q_sample-noised segments at uniform steps."""
    train_idx, holdout_idx = dataset.split(HOLDOUT_FRACTION, config.seed)
    if len(train_idx) == 0:
        train_idx = holdout_idx
    target_mean = float(np.mean(targets[train_idx]))
    target_std = float(max(np.std(targets[train_idx]), 1e-6))
    model = NoisyRegressor.create(dataset.flat_dim, schedule.N, mode, hidden=config.hidden, seed=config.seed,
                                  target_mean=target_mean, target_std=target_std, f=f, r_us=r_us)
    standardized = (targets - target_mean) / target_std

    def loss_fn(params, rng):
        model.net.params = params
        idx = train_idx[rng.integers(len(train_idx), size=config.batch_size)]
        steps = rng.integers(1, schedule.N + 1, size=len(idx))
        x_s = q_sample(schedule, dataset.x0[idx], steps, rng.standard_normal(dataset.x0[idx].shape))
        features = model.features(x_s, steps)
        residual = model.net.forward(features)[:, 0] - standardized[idx]
        loss = float(np.mean(residual ** 2))
        grads, _ = model.net.grad(features, (2.0 * residual / len(idx))[:, None])
        return loss, grads

    rng = np.random.default_rng(config.seed)
    params, trace = run_training(f'{mode} regressor', model.net.params, loss_fn, config, rng)
    model.net.params = params

    eval_idx = holdout_idx if len(holdout_idx) else train_idx
    heldout_steps = sorted({1, max(1, schedule.N // 4), max(1, schedule.N // 2), schedule.N})
    by_step = evaluate_regressor(model, schedule, dataset.x0[eval_idx], targets[eval_idx], heldout_steps,
                                 seed=config.seed + 1)
    heldout = float(np.mean(list(by_step.values())))
    logger.info(f"✓ {mode} regressor trained: held-out MSE {heldout:.5f} "
                f"({', '.join(f's={s}: {v:.4f}' for s, v in by_step.items())})")
    return model, RegressorReport(mode=mode, heldout_mse=heldout, heldout_mse_by_step=by_step, trace=trace)


def train_reward_model(dataset: OfflineDataset, schedule: NoiseSchedule, mode: str, config: TrainConfig,
                       f: int, r_us: Optional[float] = None) -> Tuple[NoisyRegressor, RegressorReport]:
    """FTR mode regresses R_hat = R + r_us h_f; raw mode regresses R (drift ablation only)."""
    if mode == 'ftr':
        r_us = dataset.default_r_us() if r_us is None else r_us
        targets = dataset.relabeled_returns(f, r_us)
        model, report = train_regressor(dataset, schedule, targets, 'ftr', config, f=f, r_us=r_us)
        _, holdout_idx = dataset.split(HOLDOUT_FRACTION, config.seed)
        auc = infeasibility_auc(model, schedule, dataset, holdout_idx, f, seed=config.seed + 2)
        if auc is not None:
            logger.info(f"FTR reward model held-out ranking AUC at s=1: {auc:.3f}")
        return model, report.model_copy(update={'ranking_auc': auc})
    if mode == 'raw':
        return train_regressor(dataset, schedule, dataset.returns, 'raw', config)
    raise GuidanceError(f"Unknown reward model mode '{mode}'")


def train_cost_model(dataset: OfflineDataset, schedule: NoiseSchedule,
                     config: TrainConfig) -> Tuple[NoisyRegressor, RegressorReport]:
    return train_regressor(dataset, schedule, dataset.segment_costs, 'cost', config)


def train_return_denoiser(dataset: OfflineDataset, config: TrainConfig, N: int, f: int,
                          r_us: float) -> Tuple[Denoiser, List[TraceRow]]:
    """Denoiser conditioned on the segment's own relabeled return (swapped baseline)."""
    low, high = return_condition_scale(dataset, f, r_us)

    def batch_fn(batch_size, p_uncond, rng):
        return sample_return_conditioned_batch(dataset, batch_size, p_uncond, rng, f, r_us)

    return train_denoiser(dataset, config, N=N, batch_fn=batch_fn, horizon=dataset.horizon,
                          env_id=dataset.spec.env_id, stats=dataset.stats,
                          condition='return', condition_scale=(low, high))


def reward_gradient(reward_model: NoisyRegressor, x_s, s: int) -> np.ndarray:
    return reward_model.input_gradient(x_s, s)


def sdgd_score(denoiser: Denoiser, reward_model: Optional[NoisyRegressor], schedule: NoiseSchedule,
               x_s, s: int, l, config: GuidanceConfig) -> np.ndarray:
    s_safe = cfg_score(denoiser, schedule, x_s, s, l, config.w)
    if config.lam == 0.0 or reward_model is None:
        return s_safe
    return compose_sdgd(s_safe, reward_gradient(reward_model, x_s, s), config.lam)


def hinge_cost_gradient(cost_model: NoisyRegressor, x_s, s: int, l: float) -> np.ndarray:
    """Gradient of max(0, C_psi(x_s, s) - l)."""
    active = cost_model.predict(x_s, s) > l
    grads = cost_model.input_gradient(x_s, s)
    return np.where(active[:, None], grads, 0.0)


def swapped_score(return_denoiser: Denoiser, cost_model: NoisyRegressor, schedule: NoiseSchedule,
                  x_s, s: int, target_return: float, l: float, config: GuidanceConfig) -> np.ndarray:
    """CFG toward a return target, classifier guidance pushing the predicted cost below l."""
    s_safe = cfg_score(return_denoiser, schedule, x_s, s, target_return, config.w)
    if config.lam == 0.0:
        return s_safe
    return s_safe - config.lam * hinge_cost_gradient(cost_model, x_s, s, l)


def regression_auc(negatives, positives) -> float:
    """P(score of a positive > score of a negative), ties counted half."""
    result = mannwhitneyu(positives, negatives, alternative='two-sided')
    return float(result.statistic / (len(positives) * len(negatives)))


def infeasibility_auc(reward_model: NoisyRegressor, schedule: NoiseSchedule, dataset: OfflineDataset,
                      indices, f: int, s: int = 1, seed: int = 0) -> Optional[float]:
    """
    How well the reward model ranks prefix-feasible segments above
    prefix-infeasible ones at step s. None when `indices` holds one class only.
    """
    indices = np.asarray(indices, dtype=int)
    infeasible = dataset.prefix_infeasibility(f)[indices].astype(bool)
    if infeasible.all() or not infeasible.any():
        return None
    x0 = dataset.x0[indices]
    x_s = q_sample(schedule, x0, s, np.random.default_rng(seed).standard_normal(x0.shape))
    scores = reward_model.predict(x_s, s)
    return regression_auc(scores[infeasible], scores[~infeasible])


class GuidedSampler:
    """
    Sampler inputs (condition embedding and guidance hook) for one guidance
    variant:

    - sdgd:    cost-limit CFG plus reward-gradient guidance
    - no_cg:   cost-limit CFG only (lambda = 0)
    - no_cfg:  null-condition sampling plus reward-gradient guidance
    - swapped: return-target CFG plus hinge cost-gradient guidance
    """

    def __init__(self, variant: str, denoiser: Denoiser, schedule: NoiseSchedule, config: GuidanceConfig,
                 reward_model: Optional[NoisyRegressor] = None, cost_model: Optional[NoisyRegressor] = None,
                 return_denoiser: Optional[Denoiser] = None, target_return: float = 1.0):
        if variant not in VARIANTS:
            raise GuidanceError(f"Unknown guidance variant '{variant}', expected one of {VARIANTS}")
        if variant in ('sdgd', 'no_cfg') and config.lam > 0 and reward_model is None:
            raise GuidanceError(f"Variant '{variant}' needs a reward model")
        if variant == 'swapped' and (return_denoiser is None or cost_model is None):
            raise GuidanceError("The swapped variant needs a return-conditioned denoiser and a cost model")
        if variant == 'no_cg':
            config = config.model_copy(update={'lam': 0.0})
        if variant == 'no_cfg':
            config = config.model_copy(update={'w': 0.0})
        self.variant = variant
        self.denoiser = denoiser
        self.schedule = schedule
        self.config = config
        self.reward_model = reward_model
        self.cost_model = cost_model
        self.return_denoiser = return_denoiser
        self.target_return = target_return

    @property
    def sampling_denoiser(self) -> Denoiser:
        return self.return_denoiser if self.variant == 'swapped' else self.denoiser

    def condition(self, limit: float) -> np.ndarray:
        if self.variant == 'swapped':
            return self.return_denoiser.embed(self._target_return_raw())
        if self.variant == 'no_cfg':
            return self.denoiser.embed(None)
        return self.denoiser.embed(limit)

    def _target_return_raw(self) -> float:
        low, high = self.return_denoiser.condition_scale
        return low + self.target_return * (high - low)

    def hook(self, limit: float):
        """Score adjustment on top of the plain conditional score used by the sampler."""
        schedule, config = self.schedule, self.config
        embedding = self.condition(limit)
        denoiser = self.sampling_denoiser

        def guidance_hook(x, s):
            s_cond = conditional_score(denoiser, schedule, x, s, embedding)
            if self.variant == 'swapped':
                total = swapped_score(denoiser, self.cost_model, schedule, x, s,
                                      self._target_return_raw(), limit, config)
            elif self.variant == 'no_cfg':
                if config.lam == 0.0:
                    return np.zeros_like(s_cond)
                return config.lam * reward_gradient(self.reward_model, x, s)
            else:
                total = sdgd_score(denoiser, self.reward_model, schedule, x, s, limit, config)
            return total - s_cond

        return guidance_hook
