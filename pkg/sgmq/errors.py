"""
Exception hierarchy shared by the tools, stages and the CLI.
"""


class SGMError(Exception):
    """Base class for every error raised by the sgmq package."""


class ConfigError(SGMError, ValueError):
    """Invalid configuration or flag combination."""


class QuantizationError(SGMError, ValueError):
    """Non-finite input, off-grid value or mantissa overflow."""


class ShapeError(SGMError, ValueError):
    """Tensor or layer shapes do not line up."""


class DataFormatError(SGMError, ValueError):
    """Malformed IDX data or an unusable dataset."""


class CodecError(SGMError, ValueError):
    """Malformed SGMQ / checkpoint file."""


class DivergenceError(SGMError, RuntimeError):
    """Training produced a non-finite or runaway loss."""


class VerificationError(SGMError, RuntimeError):
    """Integer inference disagrees with the float reference."""
