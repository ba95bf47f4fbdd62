"""
Receding-horizon execution.

Each replan samples an L-step plan conditioned on the remaining budget of
the active schedule segment, with the current state inpainted, and executes
its first f actions before planning again.
"""
import logging
from pathlib import Path
from typing import List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import env
from .dataset import Segment
from .diffusion import SampleNoise, SampleRequest, sample
from .exceptions import ConfigError, PlannerError, ShapeError
from .guidance import GuidanceConfig, GuidedSampler
from .schemas import BudgetEntrySchema, EpisodeRecord, NormalizedMetrics, PlanLog

logger = logging.getLogger(__name__)


class BudgetSchedule(BaseModel):
    """Piecewise cost limits: entry k applies from `start` for `horizon` steps."""
    model_config = ConfigDict(frozen=True)

    entries: List[BudgetEntrySchema]

    @model_validator(mode='after')
    def _ordered(self):
        if not self.entries:
            raise ValueError('a budget schedule needs at least one entry')
        if self.entries[0].start != 0:
            raise ValueError('the first schedule entry must start at step 0')
        for prev, nxt in zip(self.entries, self.entries[1:]):
            if nxt.start <= prev.start:
                raise ValueError('schedule start steps must be strictly increasing')
        if any(e.limit < 0 for e in self.entries):
            raise ValueError('schedule limits must be >= 0')
        return self

    @classmethod
    def constant(cls, limit: float, episode_len: int) -> 'BudgetSchedule':
        return cls(entries=[BudgetEntrySchema(start=0, limit=limit, horizon=episode_len)])

    @classmethod
    def from_pairs(cls, pairs, episode_len: int) -> 'BudgetSchedule':
        pairs = [(int(k), float(l)) for k, l in pairs]
        entries = []
        for i, (start, limit) in enumerate(pairs):
            end = pairs[i + 1][0] if i + 1 < len(pairs) else episode_len
            entries.append(BudgetEntrySchema(start=start, limit=limit, horizon=end - start))
        return cls(entries=entries)

    @classmethod
    def parse(cls, text: str, episode_len: int) -> 'BudgetSchedule':
        """Parse "k:l,k:l,..." (start step : limit)."""
        pairs = []
        for item in text.split(','):
            item = item.strip()
            if not item:
                continue
            start, sep, limit = item.partition(':')
            if not sep:
                raise ConfigError(f"schedule item '{item}' is not of the form k:l")
            try:
                pairs.append((int(start), float(limit)))
            except ValueError:
                raise ConfigError(f"schedule item '{item}' needs an integer step and a numeric limit")
        try:
            return cls.from_pairs(pairs, episode_len)
        except ValidationError as e:
            raise ConfigError([err['msg'] for err in e.errors()])

    @property
    def end(self) -> int:
        last = self.entries[-1]
        return last.start + last.horizon

    def segment_index(self, t: int) -> int:
        if t < 0 or t >= self.end:
            raise PlannerError(f"Step {t} is outside the schedule coverage [0, {self.end})")
        index = 0
        for k, entry in enumerate(self.entries):
            if entry.start <= t:
                index = k
        return index

    def totals(self, costs: Sequence[float]) -> List[float]:
        """Per-segment sums of a per-step cost sequence."""
        totals = [0.0] * len(self.entries)
        for t, cost in enumerate(costs):
            totals[self.segment_index(t)] += float(cost)
        return totals


def remaining_budget(schedule: BudgetSchedule, t: int, consumed_per_segment: Sequence[float]) -> float:
    k = schedule.segment_index(t)
    return max(0.0, schedule.entries[k].limit - consumed_per_segment[k])


class PlannerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    horizon: int = 32
    f: int = 8
    guidance: GuidanceConfig = GuidanceConfig()
    N: int = 100
    seed: int = 0
    mode: Literal['static', 'decrement'] = 'decrement'
    limit: float = Field(default=2.0, ge=0.0)  # used when no schedule is given

    @model_validator(mode='after')
    def _prefix_fits(self):
        if not 1 <= self.f <= self.horizon:
            raise ValueError(f'f={self.f} must be in [1, horizon={self.horizon}]')
        return self


def _check_dims(env_spec: env.EnvSpec, sampler: GuidedSampler, config: PlannerConfig):
    denoiser = sampler.sampling_denoiser
    expected = config.horizon * (env_spec.state_dim + env_spec.action_dim)
    if denoiser.flat_dim != expected:
        raise ShapeError(f"Denoiser samples dim {denoiser.flat_dim}, {env_spec.env_id} with L={config.horizon} "
                         f"needs {expected}")
    if denoiser.env_id is not None and denoiser.env_id != env_spec.env_id:
        raise ShapeError(f"Denoiser was trained on {denoiser.env_id}, not {env_spec.env_id}")
    if denoiser.stats is None:
        raise ShapeError("Planning needs a denoiser trained on a trajectory dataset")


def plan_request(sampler: GuidedSampler, config: PlannerConfig, env_spec: env.EnvSpec,
                 current_state, budget: float, seed: int, noise: Optional[SampleNoise] = None) -> SampleRequest:
    """Sampler inputs for one plan from `current_state`, conditioned on `budget` (clamped at 0)."""
    denoiser = sampler.sampling_denoiser
    normalizer = denoiser.stats.flat_normalizer(config.horizon)
    sd = env_spec.state_dim
    budget = max(0.0, float(budget))

    pinned = np.zeros(denoiser.flat_dim)
    pinned[:sd] = np.asarray(current_state, dtype=float)
    mask = np.zeros(denoiser.flat_dim, dtype=bool)
    mask[:sd] = True
    return SampleRequest(
        condition=sampler.condition(budget),
        guidance_hook=sampler.hook(budget),
        inpaint_mask=mask,
        inpaint_values=normalizer.normalize(pinned),
        seed=seed,
        noise=noise,
    )


def plan_segment(sampler: GuidedSampler, config: PlannerConfig, env_spec: env.EnvSpec,
                 current_state, budget: float, seed: int, noise: Optional[SampleNoise] = None) -> Segment:
    request = plan_request(sampler, config, env_spec, current_state, budget, seed, noise)
    flat = sample(sampler.schedule, sampler.sampling_denoiser, request)[0]
    return Segment.from_flat(flat, env_spec.state_dim, env_spec.action_dim)


def run_episode(env_spec: env.EnvSpec, sampler: GuidedSampler, config: PlannerConfig,
                schedule: Optional[BudgetSchedule], seed: int) -> EpisodeRecord:
    """
    Plan, execute the first f actions, account the cost, repeat until the
    episode ends. Without a schedule the whole episode runs under
    `config.limit`.
    """
    _check_dims(env_spec, sampler, config)
    T = env_spec.episode_len
    if schedule is None:
        schedule = BudgetSchedule.constant(config.limit, T)
    if schedule.end < T:
        raise PlannerError(f"Budget schedule covers {schedule.end} steps, the episode has {T}")

    plan_starts = list(range(0, T, config.f))
    plan_seeds = np.random.SeedSequence([config.seed, seed]).generate_state(len(plan_starts))
    consumed = [0.0] * len(schedule.entries)
    state = env.reset(env_spec, seed)
    states, actions, rewards, costs, plans = [state], [], [], [], []

    for plan_index, t0 in enumerate(plan_starts):
        k = schedule.segment_index(t0)
        active_limit = schedule.entries[k].limit
        budget = remaining_budget(schedule, t0, consumed) if config.mode == 'decrement' else active_limit
        plan = plan_segment(sampler, config, env_spec, state, budget, int(plan_seeds[plan_index]))
        condition = float(sampler.condition(budget)[0, 0])
        logger.debug(f"Plan {plan_index} at t={t0}: limit={active_limit:g} budget={budget:g}")

        n_exec = min(config.f, T - t0)
        clipped, seg_reward, seg_cost = 0, 0.0, 0.0
        for j in range(n_exec):
            t = t0 + j
            action = env.clip_action(env_spec, plan.actions[j])
            if not np.array_equal(action, plan.actions[j]):
                clipped += 1
                logger.info(f"Clipped planned action {plan.actions[j].tolist()} -> {action.tolist()} at t={t}")
            result = env.step(env_spec, state, action, t)
            consumed[schedule.segment_index(t)] += result.cost
            state = result.next_state
            states.append(state)
            actions.append(action)
            rewards.append(result.reward)
            costs.append(result.cost)
            seg_reward += result.reward
            seg_cost += result.cost

        plans.append(PlanLog(
            step=t0, active_limit=active_limit, remaining_budget=budget, condition=condition,
            plan_states=plan.states.tolist(), plan_actions=plan.actions.tolist(),
            executed_steps=n_exec, clipped_actions=clipped,
            realized_reward=seg_reward, realized_cost=seg_cost,
        ))

    return EpisodeRecord(
        env_id=env_spec.env_id, variant=sampler.variant, seed=seed, mode=config.mode,
        schedule=list(schedule.entries),
        states=[s.tolist() for s in states], actions=[a.tolist() for a in actions],
        rewards=rewards, costs=costs,
        total_reward=float(np.sum(rewards)), total_cost=float(np.sum(costs)),
        segment_costs=consumed, plans=plans,
    )


class ReturnReference(BaseModel):
    """R_rand (random-policy mean return) and R_best (best dataset episode return)."""
    r_rand: float
    r_best: float


def normalized_metrics(records: Sequence[EpisodeRecord], reference: ReturnReference, l: float) -> NormalizedMetrics:
    if not records:
        raise PlannerError("normalized_metrics needs at least one episode record")
    returns = np.array([r.total_reward for r in records])
    costs = np.array([r.total_cost for r in records])
    n = len(records)
    stderr = (lambda v: float(np.std(v, ddof=1) / np.sqrt(n)) if n > 1 else 0.0)
    span = reference.r_best - reference.r_rand
    normalized_reward = float((returns.mean() - reference.r_rand) / span) if span != 0 else 0.0
    if l > 0:
        normalized_cost, raw = float(costs.mean() / l), False
    else:
        logger.warning("Cost limit is 0: reporting mean raw cost instead of normalized cost")
        normalized_cost, raw = float(costs.mean()), True
    return NormalizedMetrics(
        n_episodes=n, mean_return=float(returns.mean()), mean_cost=float(costs.mean()),
        return_stderr=stderr(returns), cost_stderr=stderr(costs),
        normalized_reward=normalized_reward, normalized_cost=normalized_cost, cost_is_raw=raw,
    )


def write_records(records: Sequence[EpisodeRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        for record in records:
            fh.write(record.model_dump_json() + '\n')
    logger.info(f"✓ Wrote {len(records)} episode records to {path}")
    return path


def read_records(path) -> List[EpisodeRecord]:
    with open(path, encoding='utf-8') as fh:
        return [EpisodeRecord.model_validate_json(line) for line in fh if line.strip()]
