"""
Toy constrained-MDP environments.

Two deterministic environments with analytic reward and binary cost:

- PointHazard2D: a point in [-1, 1]^2 moving toward the goal (0.8, 0.8),
  with a hazard disk of radius 0.35 at the origin.
- ChainVel1D: a velocity v in [0, 1]; reward is v, cost is paid above 0.6,
  so higher return always means more cost.

Also provides scripted behavior policies for offline data generation.
"""
import logging
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit

from .exceptions import EnvError

logger = logging.getLogger(__name__)

EnvId = Literal['PointHazard2D', 'ChainVel1D']
PolicyId = Literal['random', 'greedy', 'safe']

POLICY_IDS = ('random', 'greedy', 'safe')
EPISODE_LEN = 64
SURROGATE_SHARPNESS = 20.0

GOAL = np.array([0.8, 0.8])
HAZARD_CENTER = np.array([0.0, 0.0])
HAZARD_RADIUS = 0.35
SAFE_CLEARANCE = 0.1

VELOCITY_LIMIT = 0.6
SAFE_VELOCITY = 0.55


class EnvSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    env_id: EnvId
    state_dim: int
    action_dim: int
    episode_len: int = EPISODE_LEN
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    state_low: Tuple[float, ...]
    state_high: Tuple[float, ...]
    reward_min: float
    reward_max: float


class StepResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    next_state: np.ndarray
    reward: float
    cost: float
    done: bool


class Episode(BaseModel):
    """One rollout: T+1 states, T actions, T rewards and T costs."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    env_id: EnvId
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())


def make_spec(env_id: str, episode_len: int = EPISODE_LEN) -> EnvSpec:
    if episode_len < 1:
        raise EnvError(f"episode_len must be positive, got {episode_len}")
    if env_id == 'PointHazard2D':
        step = 0.1 * np.sqrt(2.0)
        return EnvSpec(
            env_id='PointHazard2D', state_dim=2, action_dim=2, episode_len=episode_len,
            action_low=(-0.1, -0.1), action_high=(0.1, 0.1),
            state_low=(-1.0, -1.0), state_high=(1.0, 1.0),
            reward_min=-step, reward_max=step,
        )
    if env_id == 'ChainVel1D':
        return EnvSpec(
            env_id='ChainVel1D', state_dim=1, action_dim=1, episode_len=episode_len,
            action_low=(-0.2,), action_high=(0.2,),
            state_low=(0.0,), state_high=(1.0,),
            reward_min=0.0, reward_max=1.0,
        )
    raise EnvError(f"Unknown env_id '{env_id}'")


def _bounds(spec: EnvSpec):
    return (np.asarray(spec.state_low), np.asarray(spec.state_high),
            np.asarray(spec.action_low), np.asarray(spec.action_high))


def reset(spec: EnvSpec, seed: Optional[int] = None) -> np.ndarray:
    """Fixed start state; the seed is accepted for interface symmetry only."""
    if spec.env_id == 'PointHazard2D':
        return np.array([-0.8, -0.8])
    return np.array([0.0])


def clip_action(spec: EnvSpec, action) -> np.ndarray:
    _, _, a_low, a_high = _bounds(spec)
    return np.clip(np.asarray(action, dtype=float).reshape(spec.action_dim), a_low, a_high)


def hard_cost(spec: EnvSpec, state) -> float:
    """Binary cost of arriving in `state`."""
    state = np.asarray(state, dtype=float)
    if spec.env_id == 'PointHazard2D':
        return 1.0 if np.linalg.norm(state - HAZARD_CENTER) < HAZARD_RADIUS else 0.0
    return 1.0 if state[0] > VELOCITY_LIMIT else 0.0


def step(spec: EnvSpec, state, action, t: Optional[int] = None) -> StepResult:
    """
    Advance the deterministic dynamics by one step.

    The action is clipped to the action box. `done` is only set when the
    environment time `t` of this step is given and it is the last step of
    the episode.
    """
    state = np.asarray(state, dtype=float).reshape(-1)
    s_low, s_high, _, _ = _bounds(spec)
    if state.shape != (spec.state_dim,):
        raise EnvError(f"{spec.env_id} expects a state of dim {spec.state_dim}, got shape {state.shape}")
    if not np.all(np.isfinite(state)) or np.any(state < s_low) or np.any(state > s_high):
        raise EnvError(f"State {state.tolist()} is outside the {spec.env_id} state bounds")

    next_state = np.clip(state + clip_action(spec, action), s_low, s_high)
    if spec.env_id == 'PointHazard2D':
        reward = float(np.linalg.norm(state - GOAL) - np.linalg.norm(next_state - GOAL))
    else:
        reward = float(next_state[0])
    done = t is not None and t + 1 >= spec.episode_len
    return StepResult(next_state=next_state, reward=reward, cost=hard_cost(spec, next_state), done=done)


def smooth_cost(spec: EnvSpec, state) -> float:
    """Logistic surrogate of the binary cost; above 0.5 exactly where the cost is 1."""
    return float(expit(_surrogate_logit(spec, np.asarray(state, dtype=float))))


def smooth_cost_grad(spec: EnvSpec, state) -> np.ndarray:
    """Analytic gradient of smooth_cost with respect to the state."""
    state = np.asarray(state, dtype=float)
    sig = expit(_surrogate_logit(spec, state))
    slope = SURROGATE_SHARPNESS * sig * (1.0 - sig)
    if spec.env_id == 'PointHazard2D':
        offset = state - HAZARD_CENTER
        dist = np.linalg.norm(offset)
        if dist == 0.0:
            return np.zeros(2)
        return -slope * offset / dist
    return np.array([slope])


def _surrogate_logit(spec: EnvSpec, state: np.ndarray) -> float:
    if spec.env_id == 'PointHazard2D':
        return SURROGATE_SHARPNESS * (HAZARD_RADIUS - np.linalg.norm(state - HAZARD_CENTER))
    return SURROGATE_SHARPNESS * (state[0] - VELOCITY_LIMIT)


def _safe_point_action(state: np.ndarray) -> np.ndarray:
    # Head for the goal; once the next position would enter the clearance ring,
    # slide along the ring on the side closer to the goal.
    ring = HAZARD_RADIUS + SAFE_CLEARANCE
    desired = np.clip(GOAL - state, -0.1, 0.1)
    if np.linalg.norm(state + desired - HAZARD_CENTER) >= ring:
        return desired
    offset = state - HAZARD_CENTER
    dist = max(np.linalg.norm(offset), 1e-9)
    radial = offset / dist
    tangent = np.array([-radial[1], radial[0]])
    to_goal = GOAL - state
    if np.dot(tangent, to_goal) < 0.0 or (np.dot(tangent, to_goal) == 0.0 and tangent[0] < 0.0):
        tangent = -tangent
    move = 0.1 * tangent + max(ring - dist, 0.0) * radial
    return np.clip(move, -0.1, 0.1)


def policy_action(spec: EnvSpec, policy_id: str, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    _, _, a_low, a_high = _bounds(spec)
    if policy_id == 'random':
        return rng.uniform(a_low, a_high)
    if policy_id == 'greedy':
        if spec.env_id == 'PointHazard2D':
            return np.clip(GOAL - state, a_low, a_high)
        return a_high.copy()
    if policy_id == 'safe':
        if spec.env_id == 'PointHazard2D':
            return _safe_point_action(state)
        return np.clip(np.array([SAFE_VELOCITY - state[0]]), a_low, a_high)
    raise EnvError(f"Unknown policy_id '{policy_id}', expected one of {POLICY_IDS}")


def rollout(spec: EnvSpec, policy_id: str, seed: int, action_noise: float = 0.0) -> Episode:
    """
    Roll one full episode of a scripted behavior policy.

    `action_noise` adds Gaussian noise to the scripted (non-random) policies
    before clipping. The episode is a deterministic function of the seed.
    """
    if policy_id not in POLICY_IDS:
        raise EnvError(f"Unknown policy_id '{policy_id}', expected one of {POLICY_IDS}")
    rng = np.random.default_rng(seed)
    state = reset(spec, seed)
    states, actions, rewards, costs = [state], [], [], []
    for t in range(spec.episode_len):
        action = policy_action(spec, policy_id, state, rng)
        if action_noise > 0.0 and policy_id != 'random':
            action = action + rng.normal(0.0, action_noise, size=spec.action_dim)
        action = clip_action(spec, action)
        result = step(spec, state, action, t)
        state = result.next_state
        states.append(state)
        actions.append(action)
        rewards.append(result.reward)
        costs.append(result.cost)
    return Episode(
        env_id=spec.env_id,
        states=np.array(states),
        actions=np.array(actions),
        rewards=np.array(rewards),
        costs=np.array(costs),
    )


def replay(spec: EnvSpec, episode: Episode) -> bool:
    """True when re-stepping every recorded transition reproduces the episode exactly."""
    for t in range(episode.length):
        result = step(spec, episode.states[t], episode.actions[t], t)
        if not (np.array_equal(result.next_state, episode.states[t + 1])
                and result.reward == episode.rewards[t]
                and result.cost == episode.costs[t]):
            logger.warning(f"✗ Replay mismatch for {spec.env_id} at step {t}")
            return False
    return True


def simulate_actions(spec: EnvSpec, start_state, actions) -> Episode:
    """Execute an action sequence open-loop from `start_state` (actions are clipped)."""
    state = np.asarray(start_state, dtype=float).reshape(spec.state_dim)
    s_low, s_high, _, _ = _bounds(spec)
    state = np.clip(state, s_low, s_high)
    states, clipped, rewards, costs = [state], [], [], []
    for action in np.asarray(actions, dtype=float).reshape(-1, spec.action_dim):
        action = clip_action(spec, action)
        result = step(spec, state, action)
        state = result.next_state
        states.append(state)
        clipped.append(action)
        rewards.append(result.reward)
        costs.append(result.cost)
    return Episode(
        env_id=spec.env_id,
        states=np.array(states),
        actions=np.array(clipped).reshape(-1, spec.action_dim),
        rewards=np.array(rewards),
        costs=np.array(costs),
    )


def reference_return(spec: EnvSpec, n_episodes: int = 1000, seed: int = 0) -> float:
    """Mean undiscounted return of the uniform random policy (R_rand)."""
    seeds = np.random.SeedSequence(seed).generate_state(n_episodes)
    returns = [rollout(spec, 'random', int(s)).total_reward for s in seeds]
    return float(np.mean(returns))
