"""
Run configuration: an INI file with [env], [data], [diffusion], [classifier],
[guidance], [planner], [seed] and [diagnostics] sections. Every section is a
pydantic model that rejects unknown keys; problems are reported as
ConfigError entries of the form "section.key: message".
"""
import configparser
import logging
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .env import EPISODE_LEN, POLICY_IDS, EnvSpec, make_spec
from .diffusion import TrainConfig
from .exceptions import ConfigError
from .guidance import GuidanceConfig
from .planner import BudgetSchedule, PlannerConfig

logger = logging.getLogger(__name__)

DEFAULT_POLICY_MIX = {'safe': 0.4, 'greedy': 0.3, 'random': 0.3}


def _int_tuple(value):
    if isinstance(value, str):
        return tuple(int(part) for part in value.split(',') if part.strip())
    return tuple(value)


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True, populate_by_name=True)


class EnvSection(_Section):
    env_id: Literal['ChainVel1D', 'PointHazard2D'] = 'ChainVel1D'
    T_ep: int = Field(default=EPISODE_LEN, ge=1)


class DataSection(_Section):
    n_episodes: int = Field(default=100, ge=1)
    policy_mix: Dict[str, float] = DEFAULT_POLICY_MIX
    L: int = Field(default=32, ge=1)
    stride: int = Field(default=1, ge=1)
    action_noise: float = Field(default=0.02, ge=0.0)

    @field_validator('policy_mix', mode='before')
    @classmethod
    def _parse_mix(cls, value):
        if isinstance(value, str):
            mix = {}
            for item in value.split(','):
                name, sep, weight = item.strip().partition(':')
                if not sep:
                    raise ValueError(f"'{item.strip()}' is not of the form policy:weight")
                mix[name.strip()] = float(weight)
            return mix
        return value

    @field_validator('policy_mix')
    @classmethod
    def _check_mix(cls, value):
        unknown = sorted(set(value) - set(POLICY_IDS))
        if unknown:
            raise ValueError(f"unknown policies {unknown}, expected {list(POLICY_IDS)}")
        if any(w < 0 for w in value.values()):
            raise ValueError('weights must be >= 0')
        if abs(sum(value.values()) - 1.0) > 1e-9:
            raise ValueError(f'weights must sum to 1, got {sum(value.values()):g}')
        return value


class DiffusionSection(_Section):
    N: int = Field(default=100, ge=1)
    steps: int = Field(default=30000, ge=1)
    lr: float = Field(default=3e-4, gt=0.0)
    batch: int = Field(default=128, ge=1)
    p_uncond: float = Field(default=0.25, ge=0.0, le=1.0)
    hidden: Tuple[int, ...] = (256, 256, 256)

    @field_validator('hidden', mode='before')
    @classmethod
    def _split_hidden(cls, value):
        return _int_tuple(value)


class ClassifierSection(_Section):
    steps: int = Field(default=10000, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    batch: int = Field(default=128, ge=1)


class GuidanceSection(_Section):
    w: float = Field(default=4.0, ge=0.0)
    lam: float = Field(default=0.04, ge=0.0, alias='lambda')
    f: int = Field(default=8, ge=1)
    r_us: Union[Literal['auto'], float] = 'auto'

    @field_validator('r_us')
    @classmethod
    def _negative(cls, value):
        if value != 'auto' and value >= 0:
            raise ValueError("must be < 0 or 'auto'")
        return value


class PlannerSection(_Section):
    limit: float = Field(default=2.0, ge=0.0)
    schedule: Optional[str] = None
    episodes: int = Field(default=20, ge=1)
    mode: Literal['static', 'decrement'] = 'decrement'
    seeds: int = Field(default=3, ge=1)
    target_return: float = Field(default=1.0, ge=0.0, le=1.0)


class SeedSection(_Section):
    value: int = 0


class DiagnosticsSection(_Section):
    n_trials: int = Field(default=100, ge=2)
    limit: float = Field(default=2.0, ge=0.0)
    horizons: Tuple[int, ...] = (4, 8, 16, 32)

    @field_validator('horizons', mode='before')
    @classmethod
    def _split_horizons(cls, value):
        return _int_tuple(value)


class RunConfig(_Section):
    env: EnvSection = EnvSection()
    data: DataSection = DataSection()
    diffusion: DiffusionSection = DiffusionSection()
    classifier: ClassifierSection = ClassifierSection()
    guidance: GuidanceSection = GuidanceSection()
    planner: PlannerSection = PlannerSection()
    seed: SeedSection = SeedSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()

    @model_validator(mode='after')
    def _cross_checks(self):
        problems = []
        if self.guidance.f > self.data.L:
            problems.append(f"guidance.f: f={self.guidance.f} exceeds data.L={self.data.L}")
        if self.data.L > self.env.T_ep:
            problems.append(f"data.L: L={self.data.L} exceeds env.T_ep={self.env.T_ep}")
        if any(h < 0 or h > self.data.L for h in self.diagnostics.horizons):
            problems.append(f"diagnostics.horizons: every horizon must be in [0, L={self.data.L}]")
        if self.planner.schedule is not None:
            try:
                schedule = BudgetSchedule.parse(self.planner.schedule, self.env.T_ep)
                if schedule.end < self.env.T_ep:
                    problems.append('planner.schedule: does not cover the episode')
            except ValueError as e:
                problems.append(f"planner.schedule: {e}")
        if problems:
            raise ValueError('; '.join(problems))
        return self

    @property
    def seed_value(self) -> int:
        return self.seed.value

    def with_seed(self, seed: Optional[int]) -> 'RunConfig':
        if seed is None:
            return self
        return self.model_copy(update={'seed': SeedSection(value=seed)})

    def env_spec(self) -> EnvSpec:
        return make_spec(self.env.env_id, self.env.T_ep)

    def resolve_r_us(self, dataset) -> float:
        """Configured r_us, or 1.05 x the dataset bound for 'auto'."""
        if self.guidance.r_us == 'auto':
            r_us = dataset.default_r_us()
            logger.info(f"Resolved r_us=auto to {r_us:g}")
            return r_us
        return float(self.guidance.r_us)

    def guidance_config(self, r_us: Optional[float] = None, **overrides) -> GuidanceConfig:
        values = {'w': self.guidance.w, 'lam': self.guidance.lam, 'f': self.guidance.f,
                  'r_us': r_us, 'p_uncond': self.diffusion.p_uncond}
        values.update(overrides)
        return GuidanceConfig(**values)

    def denoiser_train_config(self) -> TrainConfig:
        d = self.diffusion
        return TrainConfig(steps=d.steps, batch_size=d.batch, lr=d.lr, p_uncond=d.p_uncond,
                           seed=self.seed_value, hidden=d.hidden)

    def classifier_train_config(self) -> TrainConfig:
        c = self.classifier
        return TrainConfig(steps=c.steps, batch_size=c.batch, lr=c.lr, p_uncond=0.0,
                           seed=self.seed_value, hidden=self.diffusion.hidden)

    def planner_config(self, guidance: GuidanceConfig) -> PlannerConfig:
        return PlannerConfig(horizon=self.data.L, f=guidance.f, guidance=guidance, N=self.diffusion.N,
                             seed=self.seed_value, mode=self.planner.mode, limit=self.planner.limit)

    def budget_schedule(self, limit: Optional[float] = None) -> BudgetSchedule:
        if limit is None and self.planner.schedule is not None:
            return BudgetSchedule.parse(self.planner.schedule, self.env.T_ep)
        return BudgetSchedule.constant(self.planner.limit if limit is None else limit, self.env.T_ep)


def _format_errors(error: ValidationError):
    problems = []
    for item in error.errors():
        loc = '.'.join(str(part) for part in item['loc'])
        problems.append(f"{loc}: {item['msg']}" if loc else item['msg'])
    return problems


def parse_run_config(text: str, source: str = '<string>') -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}")
    known = set(RunConfig.model_fields)
    unknown = [name for name in parser.sections() if name not in known]
    if unknown:
        raise ConfigError([f"{name}: unknown section" for name in unknown])
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    try:
        return RunConfig(**sections)
    except ValidationError as e:
        raise ConfigError(_format_errors(e))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    config = parse_run_config(text, source=str(path))
    logger.info(f"✓ Loaded run config from {path}")
    return config
