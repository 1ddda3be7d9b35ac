"""Exception types shared across the package.

Each class maps to one failure kind so callers (and the CLI) can tell
validation problems apart from runtime ones.
"""


class ManifoldMaeError(Exception):
    """Base class for all package errors."""


class DimensionError(ManifoldMaeError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ManifoldMaeError):
    """A value is outside the mathematical domain of the operation."""


class ContractError(ManifoldMaeError):
    """A caller violated an operation's precondition."""


class ConfigError(ManifoldMaeError):
    """Invalid or inconsistent configuration."""


class DegenerateInputError(ManifoldMaeError):
    """Input is structurally valid but degenerate (empty axis, zero norm...)."""


class DataError(ManifoldMaeError):
    """Dataset content is malformed or out of range."""


class CheckpointError(ManifoldMaeError):
    """Checkpoint file does not match the expected format or model."""


class TrainingAborted(ManifoldMaeError):
    """Training hit a non-finite loss; the last good checkpoint was kept."""
