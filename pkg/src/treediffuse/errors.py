"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the classes below instead of raising bare ValueErrors.
"""


class TreeDiffuseError(Exception):
    """Base class for all package errors."""


class StructureError(TreeDiffuseError):
    """A tree or network was used in a way its structure does not allow."""


class DomainError(TreeDiffuseError, ValueError):
    """An argument was outside the mathematical domain of an operation."""


class ConfigError(TreeDiffuseError):
    """Invalid configuration, unknown keys, or mismatched run settings."""


class IntegrityError(TreeDiffuseError):
    """Checkpoint or artifact bytes failed digest verification."""


class IngestionError(TreeDiffuseError):
    """Dataset files are missing or corrupt."""


class TrainingError(TreeDiffuseError):
    """Training diverged (non-finite loss) or could not proceed."""
