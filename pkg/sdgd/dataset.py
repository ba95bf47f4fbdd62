"""
Offline dataset handling: segmenting episodes, return/cost labels,
Feasible Trajectory Relabeling (FTR), normalization, conditioned batch
sampling and the on-disk dataset format.
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .env import Episode, EnvSpec, make_spec
from .exceptions import DatasetError, DatasetFormatError
from .fileformat import encode_header, read_header

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'SDGDDS01'
DEFAULT_HORIZON = 32
LIMIT_GRID_POINTS = 32
R_US_MARGIN = 1.05
STD_FLOOR = 1e-6
NULL_EMBEDDING = (0.0, 0.0)


class Segment(BaseModel):
    """A fixed-horizon slice of an episode; rewards/costs are NaN for generated segments."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.states)

    @property
    def flat_view(self) -> np.ndarray:
        """Interleaved per timestep: state then action."""
        return np.concatenate([self.states, self.actions], axis=1).reshape(-1)

    @classmethod
    def from_flat(cls, flat, state_dim: int, action_dim: int) -> 'Segment':
        rows = np.asarray(flat, dtype=float).reshape(-1, state_dim + action_dim)
        blank = np.full(len(rows), np.nan)
        return cls(states=rows[:, :state_dim].copy(), actions=rows[:, state_dim:].copy(),
                   rewards=blank, costs=blank.copy())


class SegmentLabels(BaseModel):
    R: float
    C: float
    h_f: int
    R_hat: float


class DatasetStats(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    r_min: float
    r_max: float
    c_max_seg: float
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    gamma: float = 1.0
    gamma_c: float = 1.0

    def normalize_limit(self, limit):
        """Map a raw cost limit onto the [0, 1] conditioning scale."""
        if self.c_max_seg <= 0.0:
            return np.zeros_like(np.asarray(limit, dtype=float))
        return np.clip(np.asarray(limit, dtype=float) / self.c_max_seg, 0.0, 1.0)

    def flat_normalizer(self, horizon: int) -> 'FlatNormalizer':
        mean = np.tile(np.concatenate([self.state_mean, self.action_mean]), horizon)
        std = np.tile(np.concatenate([self.state_std, self.action_std]), horizon)
        return FlatNormalizer(mean=mean, std=std)

    def to_json(self) -> dict:
        return {
            'r_min': self.r_min, 'r_max': self.r_max, 'c_max_seg': self.c_max_seg,
            'state_mean': self.state_mean.tolist(), 'state_std': self.state_std.tolist(),
            'action_mean': self.action_mean.tolist(), 'action_std': self.action_std.tolist(),
            'gamma': self.gamma, 'gamma_c': self.gamma_c,
        }

    @classmethod
    def from_json(cls, data: dict) -> 'DatasetStats':
        arrays = {k: np.asarray(data[k], dtype=float)
                  for k in ('state_mean', 'state_std', 'action_mean', 'action_std')}
        return cls(r_min=data['r_min'], r_max=data['r_max'], c_max_seg=data['c_max_seg'],
                   gamma=data['gamma'], gamma_c=data['gamma_c'], **arrays)


class FlatNormalizer(BaseModel):
    """Per-coordinate z-score of flat segments."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, flat):
        return (np.asarray(flat, dtype=float) - self.mean) / self.std

    def denormalize(self, vector):
        return np.asarray(vector, dtype=float) * self.std + self.mean


class ConditionedBatch(BaseModel):
    """
    Normalized flat segments with their conditions.

    `limits` holds the raw condition value (NaN for the null condition) and
    `embedding` the [value_normalized, 1] / [0, 0] rows fed to the denoiser.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x0: np.ndarray
    limits: np.ndarray
    embedding: np.ndarray
    indices: np.ndarray

    @property
    def null_mask(self) -> np.ndarray:
        return np.isnan(self.limits)


def condition_embedding(values_normalized, null_mask=None) -> np.ndarray:
    """[l, 1] for a limit, [0, 0] for the null condition."""
    values = np.atleast_1d(np.asarray(values_normalized, dtype=float))
    if null_mask is None:
        null_mask = np.isnan(values)
    embedding = np.stack([np.where(null_mask, 0.0, values), np.where(null_mask, 0.0, 1.0)], axis=1)
    return embedding


def segment_episodes(episodes: Sequence[Episode], horizon: int, stride: int) -> List[Segment]:
    if stride < 1:
        raise DatasetError(f"stride must be >= 1, got {stride}")
    segments = []
    for episode in episodes:
        if horizon > episode.length:
            raise DatasetError(f"Planning horizon {horizon} exceeds episode length {episode.length}")
        for start in range(0, episode.length - horizon + 1, stride):
            window = slice(start, start + horizon)
            segments.append(Segment(
                states=episode.states[window].copy(),
                actions=episode.actions[window].copy(),
                rewards=episode.rewards[window].copy(),
                costs=episode.costs[window].copy(),
            ))
    return segments


def _discounted_sum(values: np.ndarray, discount: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    weights = discount ** np.arange(values.shape[-1])
    return values @ weights


def compute_return(segment: Segment, gamma: float = 1.0) -> float:
    if not 0.0 < gamma <= 1.0:
        raise DatasetError(f"gamma must be in (0, 1], got {gamma}")
    return float(_discounted_sum(segment.rewards, gamma))


def compute_cost(segment: Segment, gamma_c: float = 1.0) -> float:
    if not 0.0 < gamma_c <= 1.0:
        raise DatasetError(f"gamma_c must be in (0, 1], got {gamma_c}")
    return float(_discounted_sum(segment.costs, gamma_c))


def prefix_infeasible(segment: Segment, f: int) -> int:
    """1 iff any cost is paid within the first f steps (undiscounted)."""
    if not 1 <= f <= len(segment.costs):
        raise DatasetError(f"Feasible length f={f} outside [1, {len(segment.costs)}]")
    return int(np.sum(segment.costs[:f]) > 0)


def ftr_relabel(labels: SegmentLabels, r_us: float) -> float:
    if r_us >= 0:
        raise DatasetError(f"r_us must be negative, got {r_us}")
    return labels.R + r_us * labels.h_f


def geometric_factor(gamma: float, horizon: int) -> float:
    if gamma == 1.0:
        return float(horizon)
    return (1.0 - gamma ** horizon) / (1.0 - gamma)


def r_us_bound(stats: DatasetStats, gamma: float, horizon: int) -> float:
    """
    Strict upper bound B on the FTR penalty: any r_us < B pushes every
    prefix-infeasible segment below every prefix-feasible one.
    """
    if stats.r_min > stats.r_max:
        raise DatasetError(f"r_min={stats.r_min} exceeds r_max={stats.r_max}")
    return (stats.r_min - stats.r_max) * geometric_factor(gamma, horizon)


def default_r_us(stats: DatasetStats, gamma: float, horizon: int) -> float:
    bound = r_us_bound(stats, gamma, horizon)
    if bound == 0.0:
        # Constant-reward data: any negative penalty separates.
        return -1.0
    return R_US_MARGIN * bound


def compute_stats(episodes: Sequence[Episode], segment_costs: np.ndarray,
                  gamma: float = 1.0, gamma_c: float = 1.0) -> DatasetStats:
    if not episodes:
        raise DatasetError("Cannot compute statistics of an empty dataset")
    states = np.concatenate([e.states for e in episodes])
    actions = np.concatenate([e.actions for e in episodes])
    rewards = np.concatenate([e.rewards for e in episodes])
    return DatasetStats(
        r_min=float(rewards.min()), r_max=float(rewards.max()),
        c_max_seg=float(np.max(segment_costs)) if len(segment_costs) else 0.0,
        state_mean=states.mean(axis=0), state_std=np.maximum(states.std(axis=0), STD_FLOOR),
        action_mean=actions.mean(axis=0), action_std=np.maximum(actions.std(axis=0), STD_FLOOR),
        gamma=gamma, gamma_c=gamma_c,
    )


def normalize(segment: Segment, stats: DatasetStats) -> np.ndarray:
    return stats.flat_normalizer(segment.horizon).normalize(segment.flat_view)


def denormalize(vector, stats: DatasetStats) -> Segment:
    vector = np.asarray(vector, dtype=float)
    width = len(stats.state_mean) + len(stats.action_mean)
    flat = stats.flat_normalizer(len(vector) // width).denormalize(vector)
    return Segment.from_flat(flat, len(stats.state_mean), len(stats.action_mean))


class OfflineDataset:
    """
    Episodes plus the stacked segment arrays and labels derived from them.

    Segment arrays have shape (M, L, dim); labels are recomputed for any
    (f, r_us) through `labels()`.
    """

    def __init__(self, spec: EnvSpec, episodes: Sequence[Episode], horizon: int = DEFAULT_HORIZON,
                 stride: int = 1, gamma: float = 1.0, gamma_c: float = 1.0):
        if not episodes:
            raise DatasetError("An offline dataset needs at least one episode")
        self.spec = spec
        self.episodes = list(episodes)
        self.horizon = horizon
        self.stride = stride
        self.gamma = gamma
        self.gamma_c = gamma_c

        segments = segment_episodes(self.episodes, horizon, stride)
        self.states = np.stack([s.states for s in segments])
        self.actions = np.stack([s.actions for s in segments])
        self.rewards = np.stack([s.rewards for s in segments])
        self.costs = np.stack([s.costs for s in segments])
        self.returns = _discounted_sum(self.rewards, gamma)
        self.segment_costs = _discounted_sum(self.costs, gamma_c)
        self.stats = compute_stats(self.episodes, self.segment_costs, gamma, gamma_c)
        self.normalizer = self.stats.flat_normalizer(horizon)
        flat = np.concatenate([self.states, self.actions], axis=2).reshape(len(segments), -1)
        self.x0 = self.normalizer.normalize(flat)

        order = np.argsort(self.segment_costs, kind='stable')
        self._cost_order = order
        self._sorted_costs = self.segment_costs[order]
        self.limit_grid = np.linspace(0.0, self.stats.c_max_seg, LIMIT_GRID_POINTS)
        logger.info(f"Built dataset: {len(self.episodes)} episodes, {len(self)} segments "
                    f"(L={horizon}, stride={stride}), c_max_seg={self.stats.c_max_seg:g}")

    def __len__(self):
        return len(self.states)

    @property
    def flat_dim(self) -> int:
        return self.x0.shape[1]

    @property
    def best_episode_return(self) -> float:
        """R_best: the largest undiscounted episode return present in the data."""
        return max(e.total_reward for e in self.episodes)

    def segment(self, index: int) -> Segment:
        return Segment(states=self.states[index], actions=self.actions[index],
                       rewards=self.rewards[index], costs=self.costs[index])

    def prefix_infeasibility(self, f: int) -> np.ndarray:
        if not 1 <= f <= self.horizon:
            raise DatasetError(f"Feasible length f={f} outside [1, {self.horizon}]")
        return (self.costs[:, :f].sum(axis=1) > 0).astype(int)

    def relabeled_returns(self, f: int, r_us: float) -> np.ndarray:
        if r_us >= 0:
            raise DatasetError(f"r_us must be negative, got {r_us}")
        return self.returns + r_us * self.prefix_infeasibility(f)

    def labels(self, index: int, f: int, r_us: float) -> SegmentLabels:
        h_f = int(self.prefix_infeasibility(f)[index])
        return SegmentLabels(R=float(self.returns[index]), C=float(self.segment_costs[index]),
                             h_f=h_f, R_hat=float(self.returns[index] + r_us * h_f))

    def default_r_us(self) -> float:
        return default_r_us(self.stats, self.gamma, self.horizon)

    def feasible_count(self, limit: float) -> int:
        return int(np.searchsorted(self._sorted_costs, limit, side='right'))

    def split(self, holdout_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Deterministic (train, held-out) index split of the segments."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_hold = max(1, int(round(holdout_fraction * len(self)))) if len(self) > 1 else 0
        return np.sort(order[n_hold:]), np.sort(order[:n_hold])

    def sample_training_batch(self, batch_size: int, p_uncond: float,
                              rng: np.random.Generator) -> ConditionedBatch:
        return sample_conditioned_batch(self, batch_size, p_uncond, rng)


def sample_conditioned_batch(dataset: OfflineDataset, batch_size: int, p_uncond: float,
                             rng: np.random.Generator) -> ConditionedBatch:
    """
    Stratified cost-limit conditioning.

    A limit l is drawn uniformly from the grid, then a segment uniformly
    from {C <= l}; empty grid points are redrawn, which is the same as
    drawing uniformly among the non-empty ones. Each (segment, l) is
    therefore an exact draw from the data restricted to C <= l.
    """
    if len(dataset) == 0:
        raise DatasetError("Cannot sample from an empty dataset")
    if not 0.0 <= p_uncond <= 1.0:
        raise DatasetError(f"p_uncond must be in [0, 1], got {p_uncond}")
    counts = np.array([dataset.feasible_count(l) for l in dataset.limit_grid])
    valid = np.flatnonzero(counts > 0)
    if len(valid) == 0:
        raise DatasetError("No cost-limit grid point admits any segment")

    grid_pick = valid[rng.integers(len(valid), size=batch_size)]
    limits = dataset.limit_grid[grid_pick]
    offsets = np.floor(rng.random(batch_size) * counts[grid_pick]).astype(int)
    indices = dataset._cost_order[offsets]
    null_mask = rng.random(batch_size) < p_uncond
    limits = np.where(null_mask, np.nan, limits)
    embedding = condition_embedding(dataset.stats.normalize_limit(np.nan_to_num(limits)), null_mask)
    return ConditionedBatch(x0=dataset.x0[indices], limits=limits, embedding=embedding, indices=indices)


def return_condition_scale(dataset: OfflineDataset, f: int, r_us: float) -> Tuple[float, float]:
    targets = dataset.relabeled_returns(f, r_us)
    return float(targets.min()), float(targets.max())


def sample_return_conditioned_batch(dataset: OfflineDataset, batch_size: int, p_uncond: float,
                                    rng: np.random.Generator, f: int, r_us: float) -> ConditionedBatch:
    """Condition each segment on its own relabeled return, min-max scaled to [0, 1]."""
    targets = dataset.relabeled_returns(f, r_us)
    low, high = float(targets.min()), float(targets.max())
    indices = rng.integers(len(dataset), size=batch_size)
    scaled = (targets[indices] - low) / (high - low) if high > low else np.zeros(batch_size)
    null_mask = rng.random(batch_size) < p_uncond
    values = np.where(null_mask, np.nan, targets[indices])
    return ConditionedBatch(x0=dataset.x0[indices], limits=values,
                            embedding=condition_embedding(scaled, null_mask), indices=indices)


def check_label_separation(dataset: OfflineDataset, f: int, r_us: float) -> bool:
    """max R_hat over prefix-infeasible segments < min R_hat over feasible ones."""
    h_f = dataset.prefix_infeasibility(f).astype(bool)
    r_hat = dataset.relabeled_returns(f, r_us)
    if h_f.all() or not h_f.any():
        return True
    return bool(r_hat[h_f].max() < r_hat[~h_f].min())


# File format

def _episode_rows(episode: Episode) -> np.ndarray:
    steps = np.concatenate([episode.states[:-1], episode.actions,
                            episode.rewards[:, None], episode.costs[:, None]], axis=1)
    return np.concatenate([steps.reshape(-1), episode.states[-1]])


def save_dataset(path, spec: EnvSpec, episodes: Sequence[Episode],
                 gamma: float = 1.0, gamma_c: float = 1.0) -> Path:
    path = Path(path)
    header = {
        'env_id': spec.env_id,
        'state_dim': spec.state_dim,
        'action_dim': spec.action_dim,
        'episode_len': spec.episode_len,
        'n_episodes': len(episodes),
        'gamma': gamma,
        'gamma_c': gamma_c,
        'dtype': 'f32le',
    }
    for episode in episodes:
        if episode.length != spec.episode_len:
            raise DatasetError(f"Episode of length {episode.length} does not match episode_len {spec.episode_len}")
    payload = np.concatenate([_episode_rows(e) for e in episodes]) if episodes else np.zeros(0)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as fh:
        fh.write(encode_header(DATASET_MAGIC, header))
        fh.write(payload.astype('<f4').tobytes())
    logger.info(f"✓ Saved {len(episodes)} episodes to {path}")
    return path


class LoadedDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    spec: EnvSpec
    episodes: List[Episode]
    gamma: float
    gamma_c: float


def load_dataset(path, expected_spec: Optional[EnvSpec] = None) -> LoadedDataset:
    raw = Path(path).read_bytes()
    header, offset = read_header(raw, DATASET_MAGIC)
    required = ('env_id', 'state_dim', 'action_dim', 'episode_len', 'n_episodes', 'gamma', 'gamma_c', 'dtype')
    missing = [k for k in required if k not in header]
    if missing:
        raise DatasetFormatError(f"Header is missing keys: {missing}")
    if header['dtype'] != 'f32le':
        raise DatasetFormatError(f"Unsupported dtype '{header['dtype']}'")
    try:
        spec = make_spec(header['env_id'], int(header['episode_len']))
    except ValueError as e:
        raise DatasetFormatError(str(e))
    if header['state_dim'] != spec.state_dim or header['action_dim'] != spec.action_dim:
        raise DatasetFormatError(
            f"Dimension mismatch: header says state/action dim {header['state_dim']}/{header['action_dim']}, "
            f"{spec.env_id} has {spec.state_dim}/{spec.action_dim}")
    if expected_spec is not None and expected_spec.env_id != spec.env_id:
        raise DatasetFormatError(f"Dataset is for {spec.env_id}, expected {expected_spec.env_id}")

    sd, ad, T = spec.state_dim, spec.action_dim, spec.episode_len
    per_episode = T * (sd + ad + 2) + sd
    n_episodes = int(header['n_episodes'])
    payload = raw[offset:]
    if len(payload) != 4 * per_episode * n_episodes:
        raise DatasetFormatError(
            f"Payload has {len(payload)} bytes, header implies {4 * per_episode * n_episodes}")
    values = np.frombuffer(payload, dtype='<f4').astype(np.float64).reshape(n_episodes, per_episode)

    episodes = []
    for row in values:
        steps = row[:T * (sd + ad + 2)].reshape(T, sd + ad + 2)
        states = np.concatenate([steps[:, :sd], row[None, T * (sd + ad + 2):]], axis=0)
        episodes.append(Episode(env_id=spec.env_id, states=states, actions=steps[:, sd:sd + ad].copy(),
                                rewards=steps[:, sd + ad].copy(), costs=steps[:, sd + ad + 1].copy()))
    logger.info(f"✓ Loaded {n_episodes} {spec.env_id} episodes from {path}")
    return LoadedDataset(spec=spec, episodes=episodes, gamma=float(header['gamma']), gamma_c=float(header['gamma_c']))
