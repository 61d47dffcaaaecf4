"""Exception hierarchy.

Every error carries a short ``category`` string and the process exit code the
CLI maps it to (2 config, 3 data, 4 numeric).
"""


class IQAError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(IQAError):
    category = "config"
    exit_code = 2


class DataError(IQAError):
    category = "data"
    exit_code = 3


class NumericError(IQAError):
    category = "numeric"
    exit_code = 4


class LengthMismatch(DataError, ValueError):
    category = "length_mismatch"


class DegenerateInput(NumericError, ValueError):
    category = "degenerate_input"


class ShapeMismatch(DataError, ValueError):
    category = "shape_mismatch"


class ImageTooSmall(DataError, ValueError):
    category = "image_too_small"


class ParseError(DataError):
    category = "parse_error"

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingFile(DataError, FileNotFoundError):
    category = "missing_file"


class EmptySplit(DataError):
    category = "empty_split"


class CropTooLarge(DataError, ValueError):
    category = "crop_too_large"


class DuplicateDistortedPath(DataError):
    category = "duplicate_distorted_path"


class MissingReference(DataError):
    category = "missing_reference"


class IdSetMismatch(DataError):
    category = "id_set_mismatch"


class UnknownTap(ConfigError):
    category = "unknown_tap"


class InputSizeMismatch(DataError, ValueError):
    category = "input_size_mismatch"


class NonFiniteActivation(NumericError):
    category = "non_finite_activation"


class NonFiniteLoss(NumericError):
    category = "non_finite_loss"


class StageError(IQAError):
    """A pipeline stage failed; wraps the original error and keeps its exit code."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.category = getattr(cause, "category", "error")
        self.exit_code = getattr(cause, "exit_code", 1)
