"""Exception hierarchy shared by the pipeline modules and the CLI."""

from typing import Optional, Sequence


class BehaviorTuningError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 3


class ConfigError(BehaviorTuningError, ValueError):
    """A configuration document, argument or input precondition failed validation."""

    exit_code = 2


class DataFormatError(BehaviorTuningError):
    """An input file does not match its expected schema."""

    exit_code = 2

    def __init__(self, message: str, *, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location += f"{path}"
        if line is not None:
            location += f":{line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
        self.path = path
        self.line = line


class CheckpointError(BehaviorTuningError):
    """A checkpoint is unreadable or belongs to another vocabulary."""

    exit_code = 2


class TrainingDivergenceError(BehaviorTuningError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, trace: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.trace = list(trace or [])


class PipelineStageError(BehaviorTuningError):
    """A pipeline stage failed; artifacts written so far are kept."""

    def __init__(self, stage: str, message: str, artifacts: Optional[dict] = None):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
        self.artifacts = dict(artifacts or {})
