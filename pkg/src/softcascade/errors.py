"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (config -> 2, backend -> 3), so new
error types should subclass one of the existing categories.
"""


class CascadeError(Exception):
    """Base class for all package errors."""


class ConfigError(CascadeError):
    """Invalid configuration value or unusable config file."""


class StructuralError(CascadeError):
    """Malformed or inconsistent data (shape mismatch, bad record, duplicate id)."""


class BackendError(CascadeError):
    """A probability backend failed or is unreachable."""


class MissingSampleError(BackendError):
    """A backend cannot resolve the requested sample id."""


class ContractViolationError(CascadeError):
    """A caller broke an internal precondition (e.g. routed without arbitration)."""


class TrainingCollapseError(CascadeError):
    """Every batch in an epoch was skipped; training cannot make progress."""
