"""Exception types shared across the package."""


class PvitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PvitError):
    """Tensor shapes or axes are inconsistent with an operation."""


class TapeError(PvitError):
    """Invalid use of a gradient tape (non-scalar root, detached root, reuse)."""


class ConfigError(PvitError):
    """Bad or missing run configuration (usage error, CLI exit code 1)."""


class FormatError(PvitError):
    """Malformed data file: checkpoint, logits file, IDX payload (exit code 2)."""


class MissingPriorError(PvitError):
    """A sample has no resolvable prior logits."""


class TrainingError(PvitError):
    """Training aborted: non-finite loss or gradient."""
