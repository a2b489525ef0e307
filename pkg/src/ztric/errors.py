"""Exception hierarchy shared by every ztric module."""


class ZtricError(Exception):
    """Base class for all errors raised by ztric."""


class ParameterError(ZtricError):
    """Invalid group parameters or configuration values."""


class ShapeError(ZtricError, ValueError):
    """Vector or matrix dimensions do not line up."""


class RangeError(ZtricError, ValueError):
    """A plaintext value falls outside the quantized range."""


class DlogNotFoundError(ZtricError):
    """No exponent inside the search bound maps to the target element.

    Usually means the bound is mis-sized or the ciphertext was corrupted.
    """


class InferenceError(ZtricError):
    """Encrypted evaluation failed for one first-layer column."""

    def __init__(self, column: int, message: str):
        super().__init__(f"column {column}: {message}")
        self.column = column


class IssuanceRefused(ZtricError):
    """The KDC declined to derive functional keys for a weight matrix."""

    def __init__(self, report):
        super().__init__(f"key issuance refused: {report.summary()}")
        self.report = report


class TrainingError(ZtricError):
    """Training diverged (non-finite loss)."""


class TopologyError(ZtricError):
    """The float model's layer/activation layout is not supported."""


class ModelFormatError(ZtricError):
    """A model file failed validation on load."""


class ParseError(ZtricError):
    """Malformed dataset file."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FrameError(ZtricError):
    """Malformed or unsupported E2 frame."""
