"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ValidationError/ParseError are input
failures (exit 2), everything else is an internal failure (exit 1).
"""


class SculptDrugError(Exception):
    """Base class for all package errors."""


class ParseError(SculptDrugError):
    """A file could not be parsed; message carries line/field context."""


class ValidationError(SculptDrugError):
    """A domain invariant was violated; message names the invariant."""


class CheckpointError(SculptDrugError):
    """Checkpoint magic/version/payload problems."""


class DimensionError(SculptDrugError):
    """Tensor shape mismatch; message names the offending layer or op."""


class GradientError(SculptDrugError):
    """Backward-pass misuse (non-scalar loss, NaN gradient, detached tensor)."""


class NondeterministicLossError(SculptDrugError):
    """finite_diff_check saw two differing evaluations of the loss."""
