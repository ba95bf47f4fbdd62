"""
Exception hierarchy for the sdgd app.

The management command maps ConfigError to exit code 1 and every other
SDGDError to exit code 2.
"""


class SDGDError(Exception):
    """Base class for all sdgd errors"""
    pass


class ConfigError(SDGDError, ValueError):
    """Run configuration failed validation"""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__('; '.join(self.problems))


class EnvError(SDGDError, ValueError):
    """Invalid environment id, state or behavior policy"""
    pass


class ShapeError(SDGDError, ValueError):
    """Array dimensions do not match what a network, model or environment expects"""
    pass


class DatasetError(SDGDError, ValueError):
    """Segmenting, labeling or batch sampling could not be done"""
    pass


class DatasetFormatError(DatasetError):
    """A dataset or checkpoint file has a malformed header or payload"""
    pass


class DiffusionError(SDGDError, ValueError):
    """Diffusion step count or step index out of range"""
    pass


class GuidanceError(SDGDError, ValueError):
    """Unknown guidance variant or reward mode, or a variant missing its models"""
    pass


class PlannerError(SDGDError, ValueError):
    """Budget schedule does not cover the episode, or nothing to evaluate"""
    pass


class TrainingDivergedError(SDGDError):
    """Training loss became NaN or infinite"""

    def __init__(self, what, step, last_finite_loss):
        self.what = what
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"{what} training diverged at step {step} "
            f"(last finite loss: {last_finite_loss})"
        )


class DiagnosticsError(SDGDError, ValueError):
    """A diagnostics experiment was asked to run with invalid inputs"""
    pass
