"""Exception hierarchy. Each class carries the process exit code used by the CLI."""


class ReIDPatternError(Exception):
    exit_code = 1


class InvalidArgumentError(ReIDPatternError, ValueError):
    exit_code = 2


class ConfigError(ReIDPatternError, ValueError):
    exit_code = 3


class GeometryError(ReIDPatternError, ValueError):
    exit_code = 4


class AugmentationError(ReIDPatternError, RuntimeError):
    exit_code = 5


class SamplingError(ReIDPatternError, RuntimeError):
    exit_code = 6


class DegenerateEmbeddingError(ReIDPatternError, ArithmeticError):
    exit_code = 7


class TrainingError(ReIDPatternError, RuntimeError):
    exit_code = 8


class OptimizationError(ReIDPatternError, RuntimeError):
    exit_code = 9

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ProtocolError(ReIDPatternError, RuntimeError):
    exit_code = 10


class IngestionError(ReIDPatternError, RuntimeError):
    exit_code = 11


class StageError(ReIDPatternError, RuntimeError):
    """Wraps a failure inside a pipeline stage; keeps the original exit code."""

    def __init__(self, stage, cause):
        super().__init__(f"[stage {stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
