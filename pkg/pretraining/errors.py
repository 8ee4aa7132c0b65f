"""Exception hierarchy shared by every module.

Each exception carries the process exit code the command line reports for it.
"""


class PretrainingError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(PretrainingError):
    """Malformed or unknown configuration."""

    exit_code = 2


class MissingInputError(PretrainingError):
    """A required input file does not exist."""

    exit_code = 3


class MissingDependencyError(PretrainingError):
    """An objective needs an artifact that was not supplied."""

    exit_code = 4


class HeadMismatchError(PretrainingError):
    """The model head does not fit the objective."""

    exit_code = 5


class CorpusError(PretrainingError):
    pass


class EmbeddingError(PretrainingError):
    pass


class ClusterError(PretrainingError):
    pass


class CountMatrixError(PretrainingError):
    pass


class ObjectiveError(PretrainingError):
    pass


class ModelError(PretrainingError):
    pass


class TrainingError(PretrainingError):
    pass
