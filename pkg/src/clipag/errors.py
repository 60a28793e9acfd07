"""Exception hierarchy shared across the package."""


class ClipagError(Exception):
    """Base class for every error raised deliberately by clipag."""

    category = "error"


class ShapeError(ClipagError, ValueError):
    category = "shape"


class TokenizerError(ClipagError, ValueError):
    category = "tokenizer"


class DegenerateInputError(ClipagError, ValueError):
    category = "degenerate_input"


class ContractError(ClipagError, ValueError):
    """An input violates a documented precondition."""

    category = "contract"


class CapabilityError(ClipagError, RuntimeError):
    category = "capability"


class CheckpointError(ClipagError):
    category = "checkpoint"


class ConfigError(ClipagError, ValueError):
    category = "config"


class NonFiniteError(ClipagError, FloatingPointError):
    """A loss or gradient became NaN/inf; carries a diagnostic payload."""

    category = "non_finite"

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class DataError(ClipagError):
    category = "data"
