"""
Error hierarchy for the nowcast package
Every error carries the exit code the CLI reports for it
"""

from typing import Optional


class NowcastError(Exception):
    """Base class for all expected failures"""

    exit_code = 1


class ConfigError(NowcastError):
    """Invalid configuration value, unknown key or malformed config line"""

    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(NowcastError, ValueError):
    """Shape inconsistency, always naming the layer where it was detected"""

    exit_code = 2

    def __init__(self, layer: str, message: str):
        self.layer = layer
        super().__init__(f"{layer}: {message}")


class OddCrop(ShapeError):
    """A center crop (or stride-2 layer) would be asymmetric"""


class NegativeExtent(ShapeError):
    """A layer would produce an empty or negative spatial extent"""


class DataError(NowcastError):
    """Problem with input data or a stored artifact"""

    exit_code = 3


class BadMagic(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class TruncatedFile(DataError):
    pass


class PayloadMismatch(DataError):
    """Header and payload disagree"""


class ConfigHashMismatch(DataError):
    """Stored artifact was produced for a different configuration"""


class SamplingError(DataError):
    pass


class ZeroVariance(DataError):
    pass


class DivergenceError(NowcastError):
    """Training produced a non-finite loss or inconsistent replicas"""

    exit_code = 4


class NonFiniteGradient(DivergenceError):
    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient for parameter '{parameter}'")
