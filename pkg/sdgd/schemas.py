from typing import List, Optional

from pydantic import BaseModel


# Planner schemas
class BudgetEntrySchema(BaseModel):
    start: int
    limit: float
    horizon: int


class PlanLog(BaseModel):
    step: int                   # environment step at which the plan was issued
    active_limit: float         # l_k of the schedule segment active at `step`
    remaining_budget: float
    condition: float            # normalized condition value fed to the denoiser
    plan_states: List[List[float]]
    plan_actions: List[List[float]]
    executed_steps: int
    clipped_actions: int
    realized_reward: float
    realized_cost: float


class EpisodeRecord(BaseModel):
    env_id: str
    variant: str
    seed: int
    mode: str                   # 'static' or 'decrement'
    schedule: List[BudgetEntrySchema]
    states: List[List[float]]
    actions: List[List[float]]
    rewards: List[float]
    costs: List[float]
    total_reward: float
    total_cost: float
    segment_costs: List[float]
    plans: List[PlanLog]


class NormalizedMetrics(BaseModel):
    n_episodes: int
    mean_return: float
    mean_cost: float
    return_stderr: float
    cost_stderr: float
    normalized_reward: float
    normalized_cost: float
    cost_is_raw: bool = False   # True when l = 0: normalized_cost holds the mean raw cost


# Diagnostics schemas
class DriftReport(BaseModel):
    n_trials: int
    seed: int
    cost_conditioned: List[float]   # C(tau_0^C)
    raw_guided: List[float]         # C(tau_0^R)
    ftr_guided: List[float]         # C(tau_0^R_hat)
    delta_raw: List[float]
    delta_ftr: List[float]
    mean_delta_raw: float
    mean_delta_ftr: float
    paired_mean: float              # mean(delta_raw - delta_ftr)
    paired_stderr: float
    n_ftr_smaller: int
    n_ftr_larger: int
    sign_test_p: float


class AlignmentReport(BaseModel):
    n_trials: int
    seed: int
    steps: List[int]
    per_step: List[List[float]]     # [trial][step index] alignment a_s
    totals: List[float]             # A_f per trial
    fraction_positive: float
    mean_total: float


class CorrelationReport(BaseModel):
    steps: List[int]
    pearson_r: List[Optional[float]]    # None where a variance is zero
    spearman_r_vs_step: Optional[float]


class RolloutErrorRow(BaseModel):
    horizon: int
    position: int               # segment position compared; min(horizon, L - 1)
    autoregressive_error: float
    joint_error: float


class RolloutErrorReport(BaseModel):
    rows: List[RolloutErrorRow]
    n_starts: int


class SweepRow(BaseModel):
    axis: str                   # limit, lambda-w, f or the ablation variant
    value: str
    limit: float
    lam: float
    w: float
    f: int
    seed: int
    normalized_reward: float
    normalized_cost: float
    mean_return: float
    mean_cost: float

    @classmethod
    def header(cls):
        return list(cls.model_fields)

    def row(self):
        return [getattr(self, name) for name in self.model_fields]
