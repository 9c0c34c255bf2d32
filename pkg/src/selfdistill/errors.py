"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 2


class ConfigError(PipelineError, ValueError):
    exit_code = 2


class PlanError(ConfigError):
    pass


class DependencyError(PipelineError):
    exit_code = 3


class StaleCacheError(DependencyError):
    pass


class NumericError(PipelineError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class FormatError(PipelineError, ValueError):
    # an unreadable artifact is a broken upstream dependency
    exit_code = 3


class UnsupportedFormatError(FormatError):
    pass


class ShapeError(PipelineError, ValueError):
    pass


class EmptyInputError(PipelineError, ValueError):
    pass


class InsufficientDataError(PipelineError, ValueError):
    pass


class LabelRangeError(PipelineError, ValueError):
    pass


class AlignmentError(PipelineError, ValueError):
    pass


class InfeasibleError(PipelineError, ValueError):
    pass


class LeakageError(PipelineError):
    pass


class UsageError(PipelineError, RuntimeError):
    pass


class UndefinedMetricError(PipelineError, ValueError):
    pass
