"""
DDPM machinery: noise schedule, forward noising, conditional epsilon-network
training with a null condition, and ancestral sampling with an additive
score-space guidance hook and state inpainting.
"""
import logging
from pathlib import Path
from typing import Callable, List, Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .approx import AdamState, NetSpec, Network, read_sidecar
from .dataset import ConditionedBatch, DatasetStats, condition_embedding
from .exceptions import DiffusionError, ShapeError, TrainingDivergedError

logger = logging.getLogger(__name__)

BETA_START = 1e-4
BETA_END = 0.02
STEP_EMBEDDING_DIM = 16
CONDITION_DIM = 2
LOSS_EMA = 0.98

GuidanceHook = Callable[[np.ndarray, int], np.ndarray]


class NoiseSchedule(BaseModel):
    """Arrays are indexed by diffusion step s = 0..N; entry 0 is the clean-data convention."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    N: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray

    def check_step(self, s, low: int = 1):
        s_arr = np.asarray(s)
        if np.any(s_arr < low) or np.any(s_arr > self.N):
            raise DiffusionError(f"Diffusion step {s} outside [{low}, {self.N}]")


def make_schedule(N: int = 100) -> NoiseSchedule:
    if N < 1:
        raise DiffusionError(f"Number of diffusion steps must be >= 1, got {N}")
    betas = np.concatenate([[0.0], np.linspace(BETA_START, BETA_END, N)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    posterior_var = np.zeros(N + 1)
    posterior_var[1] = betas[1]
    posterior_var[2:] = betas[2:] * (1.0 - alpha_bars[1:-1]) / (1.0 - alpha_bars[2:])
    return NoiseSchedule(N=N, betas=betas, alphas=alphas, alpha_bars=alpha_bars, posterior_var=posterior_var)


def q_sample(schedule: NoiseSchedule, x0, s, eps) -> np.ndarray:
    """sqrt(abar_s) x0 + sqrt(1 - abar_s) eps; s may be a scalar or one step per row, s=0 gives x0."""
    schedule.check_step(s, low=0)
    abar = schedule.alpha_bars[np.asarray(s)]
    if np.ndim(abar) == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def eps_to_score(schedule: NoiseSchedule, eps_pred, s) -> np.ndarray:
    schedule.check_step(s)
    return -np.asarray(eps_pred) / np.sqrt(1.0 - schedule.alpha_bars[s])


def score_to_eps(schedule: NoiseSchedule, score, s) -> np.ndarray:
    schedule.check_step(s)
    return -np.asarray(score) * np.sqrt(1.0 - schedule.alpha_bars[s])


def predict_x0(schedule: NoiseSchedule, x_s, s, eps_pred) -> np.ndarray:
    abar = schedule.alpha_bars[s]
    return (x_s - np.sqrt(1.0 - abar) * eps_pred) / np.sqrt(abar)


def step_embedding(s, N: int) -> np.ndarray:
    """16 sinusoidal features of s/N, one row per step."""
    u = np.atleast_1d(np.asarray(s, dtype=float)) / N
    freqs = np.pi * 2.0 ** np.arange(STEP_EMBEDDING_DIM // 2)
    angles = u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Denoiser:
    """
    Epsilon network over [flat segment, step embedding, condition embedding].

    The condition embedding is [value, 1] for a condition value in [0, 1] and
    [0, 0] for the null condition. `condition` records what the value means
    ('cost' limit or 'return' target); `stats` and `horizon` are absent for
    synthetic (non-trajectory) data.
    """

    def __init__(self, net: Network, N: int, flat_dim: int, horizon: Optional[int] = None,
                 env_id: Optional[str] = None, stats: Optional[DatasetStats] = None,
                 condition: str = 'cost', condition_scale: Tuple[float, float] = (0.0, 1.0)):
        expected = flat_dim + STEP_EMBEDDING_DIM + CONDITION_DIM
        if net.spec.input_dim != expected or net.spec.output_dim != flat_dim:
            raise ShapeError(f"Denoiser network must map {expected} -> {flat_dim}, "
                             f"got {net.spec.input_dim} -> {net.spec.output_dim}")
        self.net = net
        self.N = N
        self.flat_dim = flat_dim
        self.horizon = horizon
        self.env_id = env_id
        self.stats = stats
        self.condition = condition
        self.condition_scale = tuple(condition_scale)

    @classmethod
    def create(cls, flat_dim: int, N: int, hidden=(256, 256, 256), seed: int = 0, **kwargs) -> 'Denoiser':
        spec = NetSpec(input_dim=flat_dim + STEP_EMBEDDING_DIM + CONDITION_DIM, output_dim=flat_dim,
                       hidden=tuple(hidden))
        return cls(Network(spec, seed=seed), N, flat_dim, **kwargs)

    def features(self, x, s, cond) -> np.ndarray:
        x = np.atleast_2d(x)
        s = np.broadcast_to(np.asarray(s), (len(x),))
        cond = np.broadcast_to(np.atleast_2d(cond), (len(x), CONDITION_DIM))
        return np.concatenate([x, step_embedding(s, self.N), cond], axis=1)

    def predict_eps(self, x, s, cond) -> np.ndarray:
        return self.net.forward(self.features(x, s, cond))

    def embed(self, value) -> np.ndarray:
        """Condition embedding for a raw condition value, or the null embedding for None."""
        if value is None:
            return condition_embedding([np.nan])
        if self.condition == 'cost':
            scaled = self.stats.normalize_limit(value) if self.stats is not None else value
        else:
            low, high = self.condition_scale
            scaled = (value - low) / (high - low) if high > low else 0.0
        return condition_embedding([scaled])

    def sidecar(self) -> dict:
        return {
            'kind': 'denoiser',
            'N': self.N,
            'flat_dim': self.flat_dim,
            'L': self.horizon,
            'env_id': self.env_id,
            'stats': self.stats.to_json() if self.stats is not None else None,
            'condition': self.condition,
            'condition_scale': list(self.condition_scale),
        }

    def save(self, path) -> Path:
        return self.net.save(path, sidecar=self.sidecar())

    @classmethod
    def load(cls, path) -> 'Denoiser':
        meta = read_sidecar(path)
        stats = DatasetStats.from_json(meta['stats']) if meta.get('stats') else None
        return cls(Network.load(path), meta['N'], meta['flat_dim'], horizon=meta.get('L'),
                   env_id=meta.get('env_id'), stats=stats, condition=meta.get('condition', 'cost'),
                   condition_scale=tuple(meta.get('condition_scale', (0.0, 1.0))))


class GaussianScoreOracle:
    """Exact epsilon for data x0 ~ N(mean, std^2 I); stands in for a trained denoiser."""

    def __init__(self, schedule: NoiseSchedule, mean=0.0, std=1.0, flat_dim: int = 1):
        self.schedule = schedule
        self.flat_dim = flat_dim
        self.mean = mean
        self.std = std

    def predict_eps(self, x, s, cond=None) -> np.ndarray:
        abar = self.schedule.alpha_bars[s]
        variance = abar * self.std ** 2 + (1.0 - abar)
        score = -(np.asarray(x) - np.sqrt(abar) * self.mean) / variance
        return score_to_eps(self.schedule, score, s)


class TrainingSource(Protocol):
    flat_dim: int

    def sample_training_batch(self, batch_size: int, p_uncond: float,
                              rng: np.random.Generator) -> ConditionedBatch: ...


class GaussianSource:
    """Synthetic unconditioned data x0 ~ N(mean, std^2) in `dim` dimensions."""

    def __init__(self, mean: float = 0.0, std: float = 1.0, dim: int = 1):
        self.mean = mean
        self.std = std
        self.flat_dim = dim

    def sample_training_batch(self, batch_size, p_uncond, rng) -> ConditionedBatch:
        x0 = self.mean + self.std * rng.standard_normal((batch_size, self.flat_dim))
        limits = np.full(batch_size, np.nan)
        return ConditionedBatch(x0=x0, limits=limits, embedding=condition_embedding(limits),
                                indices=np.arange(batch_size))


def denoising_loss(denoiser: Denoiser, schedule: NoiseSchedule, batch: ConditionedBatch,
                   rng: Optional[np.random.Generator] = None, steps=None, noise=None,
                   with_grad: bool = True):
    """
    Mean over the batch of ||eps - eps_theta(x_s, s, cond)||^2.

    Steps and noise are drawn from `rng` unless given. Returns (loss, grads),
    grads being None when `with_grad` is False.
    """
    B = len(batch.x0)
    if steps is None:
        steps = rng.integers(1, schedule.N + 1, size=B)
    if noise is None:
        noise = rng.standard_normal(batch.x0.shape)
    x_s = q_sample(schedule, batch.x0, steps, noise)
    if not with_grad:
        residual = noise - denoiser.predict_eps(x_s, steps, batch.embedding)
        return float(np.mean(np.sum(residual ** 2, axis=1))), None
    features = denoiser.features(x_s, steps, batch.embedding)
    residual = noise - denoiser.net.forward(features)
    loss = float(np.mean(np.sum(residual ** 2, axis=1)))
    param_grads, _ = denoiser.net.grad(features, -2.0 * residual / B)
    return loss, param_grads


class TrainConfig(BaseModel):
    steps: int = 30000
    batch_size: int = 128
    lr: float = 3e-4
    p_uncond: float = 0.25
    seed: int = 0
    hidden: Tuple[int, ...] = (256, 256, 256)
    log_every: int = 100


class TraceRow(BaseModel):
    step: int
    loss: float
    smoothed_loss: float


def run_training(what: str, params: np.ndarray, loss_fn, config: TrainConfig,
                 rng: np.random.Generator) -> Tuple[np.ndarray, List[TraceRow]]:
    """
    Shared Adam loop. `loss_fn(params, rng)` returns (loss, grads).
    The trace gets one row every `log_every` steps and at the last step.
    """
    adam = AdamState(len(params), lr=config.lr)
    trace: List[TraceRow] = []
    smoothed = None
    last_finite = None
    for step in range(1, config.steps + 1):
        loss, grads = loss_fn(params, rng)
        if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
            logger.error(f"✗ {what} training diverged at step {step}")
            raise TrainingDivergedError(what, step, last_finite)
        last_finite = loss
        smoothed = loss if smoothed is None else LOSS_EMA * smoothed + (1.0 - LOSS_EMA) * loss
        params = adam.step(params, grads)
        if step % config.log_every == 0 or step == config.steps or step == 1:
            trace.append(TraceRow(step=step, loss=loss, smoothed_loss=smoothed))
            if step % config.log_every == 0:
                logger.info(f"{what} step {step}/{config.steps}: loss={loss:.5f} smoothed={smoothed:.5f}")
    if len(trace) > 1 and trace[-1].smoothed_loss >= trace[0].loss:
        logger.warning(f"{what}: final smoothed loss {trace[-1].smoothed_loss:.5f} "
                       f"did not improve on initial loss {trace[0].loss:.5f}")
    return params, trace


def train_denoiser(source: TrainingSource, config: TrainConfig, N: int = 100,
                   batch_fn: Optional[Callable] = None, **denoiser_kwargs) -> Tuple[Denoiser, List[TraceRow]]:
    """
    Train an epsilon network on conditioned batches from `source`.

    `batch_fn(batch_size, p_uncond, rng)` overrides the source's own batch
    sampler (used for return conditioning).
    """
    schedule = make_schedule(N)
    sample_batch = batch_fn or source.sample_training_batch
    denoiser = Denoiser.create(source.flat_dim, N, hidden=config.hidden, seed=config.seed, **denoiser_kwargs)
    rng = np.random.default_rng(config.seed)

    def loss_fn(params, rng):
        denoiser.net.params = params
        batch = sample_batch(config.batch_size, config.p_uncond, rng)
        return denoising_loss(denoiser, schedule, batch, rng)

    params, trace = run_training('denoiser', denoiser.net.params, loss_fn, config, rng)
    denoiser.net.params = params
    logger.info(f"✓ Denoiser trained: {config.steps} steps, final loss {trace[-1].loss:.5f}")
    return denoiser, trace


class SampleNoise(BaseModel):
    """Initial draw x_N and one noise vector per reverse step (steps[s-1] is used at step s)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    initial: np.ndarray
    steps: np.ndarray


def draw_sample_noise(N: int, n_samples: int, flat_dim: int, rng: np.random.Generator) -> SampleNoise:
    initial = rng.standard_normal((n_samples, flat_dim))
    steps = rng.standard_normal((N, n_samples, flat_dim))
    steps[0] = 0.0
    return SampleNoise(initial=initial, steps=steps)


class SampleRequest(BaseModel):
    """
    One batch of reverse chains.

    `condition` is the condition embedding row (see Denoiser.embed);
    `inpaint_mask` marks pinned flat positions and `inpaint_values` holds
    their (normalized) values, per row or shared.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    condition: np.ndarray
    guidance_hook: Optional[GuidanceHook] = None
    inpaint_mask: Optional[np.ndarray] = None
    inpaint_values: Optional[np.ndarray] = None
    seed: int = 0
    n_samples: int = 1
    noise: Optional[SampleNoise] = None


def combine_hooks(*hooks: GuidanceHook) -> GuidanceHook:
    def combined(x, s):
        return sum(hook(x, s) for hook in hooks)
    return combined


def _inpaint(schedule: NoiseSchedule, x, s, mask, values, noise):
    if mask is None:
        return x
    x = x.copy()
    pinned = q_sample(schedule, np.broadcast_to(values, x.shape), s, noise)
    x[:, mask] = pinned[:, mask]
    return x


def ancestral_step(schedule: NoiseSchedule, denoiser, x_s, s: int, cond,
                   guidance_hook: Optional[GuidanceHook], noise, inpaint=None) -> np.ndarray:
    """
    One reverse step x_s -> x_{s-1}.

    The hook's score adjustment g enters as eps_hat = eps_theta - sqrt(1 - abar_s) g.
    `inpaint` is an optional (mask, values) pair; pinned coordinates are
    replaced by q_sample(values, s-1) using this step's noise.
    """
    schedule.check_step(s)
    x_s = np.atleast_2d(x_s)
    eps_hat = denoiser.predict_eps(x_s, s, cond)
    if guidance_hook is not None:
        eps_hat = eps_hat - np.sqrt(1.0 - schedule.alpha_bars[s]) * guidance_hook(x_s, s)
    mean = (x_s - schedule.betas[s] / np.sqrt(1.0 - schedule.alpha_bars[s]) * eps_hat) / np.sqrt(schedule.alphas[s])
    noise = np.zeros_like(x_s) if s == 1 else np.broadcast_to(noise, x_s.shape)
    x_prev = mean + np.sqrt(schedule.posterior_var[s]) * noise
    if inpaint is not None:
        x_prev = _inpaint(schedule, x_prev, s - 1, inpaint[0], inpaint[1], noise)
    return x_prev


def sample_chain(schedule: NoiseSchedule, denoiser, request: SampleRequest) -> List[np.ndarray]:
    """Full reverse chain; element k is x_{N-k}, the last element is the clean sample x_0."""
    flat_dim = denoiser.flat_dim
    noise = request.noise
    if noise is None:
        noise = draw_sample_noise(schedule.N, request.n_samples, flat_dim, np.random.default_rng(request.seed))
    if noise.initial.shape[1] != flat_dim or noise.steps.shape[0] != schedule.N:
        raise ShapeError(f"Injected noise must hold {schedule.N} steps of dim {flat_dim}")
    inpaint = None
    if request.inpaint_mask is not None:
        mask = np.asarray(request.inpaint_mask, dtype=bool)
        if mask.shape != (flat_dim,):
            raise ShapeError(f"Inpaint mask must have length {flat_dim}")
        inpaint = (mask, np.asarray(request.inpaint_values, dtype=float))

    x = noise.initial
    if inpaint is not None:
        x = _inpaint(schedule, x, schedule.N, inpaint[0], inpaint[1], noise.initial)
    chain = [x]
    for s in range(schedule.N, 0, -1):
        x = ancestral_step(schedule, denoiser, x, s, request.condition, request.guidance_hook,
                           noise.steps[s - 1], inpaint)
        chain.append(x)
    return chain


def sample(schedule: NoiseSchedule, denoiser, request: SampleRequest) -> np.ndarray:
    """Clean samples, denormalized when the denoiser carries dataset statistics."""
    x0 = sample_chain(schedule, denoiser, request)[-1]
    stats = getattr(denoiser, 'stats', None)
    horizon = getattr(denoiser, 'horizon', None)
    if stats is None or horizon is None:
        return x0
    return stats.flat_normalizer(horizon).denormalize(x0)
