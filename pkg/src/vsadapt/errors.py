"""Exception hierarchy and the exit codes the CLI maps it to."""
from typing import Any, Optional, Sequence

# Process exit codes used by the command line entry point.
EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE_ERROR = 2


class VsAdaptError(Exception):
    """Base class for every error raised on purpose by this package."""


class ArgumentError(VsAdaptError, ValueError):
    """A caller passed arguments that violate an operation's preconditions."""


class ValidationError(VsAdaptError, ValueError):
    """Data violates an invariant of one of the domain types."""


class VolumeIOError(VsAdaptError, OSError):
    """A volume or sidecar file could not be read or written."""


class RegistrationError(VsAdaptError):
    """
    Affine registration diverged (similarity became NaN).
    :param last_transform: the last transform for which the similarity was finite
    """

    def __init__(self, message: str, last_transform: Any = None):
        super().__init__(message)
        self.last_transform = last_transform


class StageError(VsAdaptError):
    """A sub-operation of a stage (registration, a model forward, ...) failed; `stage` names which one."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f'{stage}: {cause}')
        self.stage = stage
        self.cause = cause


class TrainingDivergedError(VsAdaptError):
    """A training loss became NaN or infinite. `last_checkpoint` is the last good archive, if any."""

    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        if last_checkpoint:
            message = f'{message} (last good checkpoint: {last_checkpoint})'
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(VsAdaptError):
    """A checkpoint archive is missing, unreadable or incompatible with the requested model."""


class ArtifactMissingError(VsAdaptError):
    """An upstream artifact a stage depends on does not exist yet."""

    def __init__(self, path: str, producer: str):
        super().__init__(f'missing artifact {path} - run `vsadapt {producer}` first')
        self.path = path
        self.producer = producer


class ConfigError(VsAdaptError):
    """The pipeline configuration file is invalid. `line` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        where = ''
        if path is not None:
            where = f'{path}:{line}: ' if line is not None else f'{path}: '
        elif line is not None:
            where = f'line {line}: '
        super().__init__(where + message)
        self.line = line
        self.path = path


class EvaluationError(VsAdaptError):
    """Evaluation could not run at all; `missing` lists subject ids without predictions."""

    def __init__(self, message: str, missing: Sequence[str] = ()):
        if missing:
            message = f'{message}: {", ".join(missing)}'
        super().__init__(message)
        self.missing = list(missing)
