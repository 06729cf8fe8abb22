"""Exception hierarchy.

Every error carries a short ``category`` string that the CLI reports in its
machine-readable error line.
"""


class SimError(Exception):
    category = "error"


class ShapeMismatch(SimError):
    category = "shape"


class InvalidAxis(SimError):
    category = "shape"


class NonIntegralOutputSize(SimError):
    category = "shape"


class NonFiniteError(SimError):
    category = "numeric"


class DegenerateBatch(SimError):
    category = "numeric"


class InvalidGroupCount(SimError):
    category = "config"


class InvalidRate(SimError):
    category = "config"


class LabelOutOfRange(SimError):
    category = "data"


class InvalidSpec(SimError):
    category = "config"


class StaleCache(SimError):
    category = "protocol"


class MissingAnchor(SimError):
    category = "protocol"


class InvalidFraction(SimError):
    category = "config"


class VariantMismatch(SimError):
    category = "protocol"


class EmptyShard(SimError):
    category = "data"


class EmptyUpdateSet(SimError):
    category = "protocol"


class InvalidCounts(SimError):
    category = "data"


class IndivisibleSplit(SimError):
    category = "data"


class InvalidAlpha(SimError):
    category = "config"


class RetriesExhausted(SimError):
    category = "data"


class ParseError(SimError):
    category = "config"


class ConstraintViolation(SimError):
    category = "config"


class FingerprintMismatch(SimError):
    category = "report"


class CheckpointError(SimError):
    category = "io"
