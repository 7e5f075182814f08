"""Exception taxonomy shared by every module.

Each class corresponds to one failure category surfaced at the CLI as a
machine-parsable error line; ``kind`` is the stable identifier used there.
"""


class VokenRetError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ConfigError(VokenRetError):
    """Invalid configuration value or combination."""

    kind = "config"


class FormatError(VokenRetError):
    """Malformed file: bad magic, header, or payload length."""

    kind = "format"


class IntegrityError(VokenRetError):
    """Cross-artifact inconsistency, e.g. dangling ids or index/trie desync."""

    kind = "integrity"


class ShapeError(VokenRetError):
    """Operands with incompatible shapes; message carries both shapes."""

    kind = "shape"


class UsageError(VokenRetError):
    """API misuse: bad argument values or call sequence."""

    kind = "usage"


class TrainingError(VokenRetError):
    """Training diverged (non-finite loss) or cannot proceed."""

    kind = "training"


class DependencyError(VokenRetError):
    """A required input artifact is missing."""

    kind = "dependency"
