"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` and the process exit
code the CLI maps it to (2 usage, 3 data/shape, 4 numeric).
"""


class AtlasCrfError(Exception):
    code = "error"
    exit_code = 3


class UsageError(AtlasCrfError):
    code = "usage"
    exit_code = 2


class BadMagicError(AtlasCrfError):
    code = "bad_magic"


class DimOverflowError(AtlasCrfError):
    code = "dim_overflow"


class TruncatedPayloadError(AtlasCrfError):
    code = "truncated_payload"


class FormatError(AtlasCrfError):
    """Malformed header fields other than magic/dims (kind, dtype, reserved)."""

    code = "bad_format"


class ShapeError(AtlasCrfError):
    code = "shape_mismatch"


class MissingFileError(AtlasCrfError):
    code = "missing_file"


class InvalidParamError(AtlasCrfError):
    code = "invalid_param"


class SizeGuardError(AtlasCrfError):
    """Raised when an intentionally small-scale routine is fed a large volume."""

    code = "size_guard"


class ClassAbsentError(AtlasCrfError):
    """Surface distances are undefined when a class is empty in both maps."""

    code = "class_absent"


class NonFiniteError(AtlasCrfError):
    code = "non_finite"
    exit_code = 4


class TapeIntegrityError(AtlasCrfError):
    code = "tape_integrity"
    exit_code = 4


class CheckpointError(AtlasCrfError):
    code = "checkpoint"


class GradCheckError(AtlasCrfError):
    code = "gradcheck_failed"
    exit_code = 4
