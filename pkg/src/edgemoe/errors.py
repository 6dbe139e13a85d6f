"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and structural problems
exit with 2, infeasible deployments with 3.
"""

from __future__ import annotations


class EdgeMoEError(Exception):
    pass


class ConfigError(EdgeMoEError, ValueError):
    """Invalid parameters or scenario fields. ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class StructuralError(EdgeMoEError, ValueError):
    """Inputs that disagree with each other (e.g. trace vs. model geometry)."""


class InfeasibleError(EdgeMoEError):
    def __init__(self, message: str, shortfall_bytes: float = 0.0):
        self.shortfall_bytes = float(shortfall_bytes)
        super().__init__(f"{message} (shortfall {self.shortfall_bytes:.0f} bytes)")


class SizeGuardError(EdgeMoEError):
    pass


class FrameError(EdgeMoEError, ValueError):
    pass


class HelloValueError(EdgeMoEError, ValueError):
    pass


class EncodingError(EdgeMoEError, ValueError):
    pass


class CoverageError(EdgeMoEError, AssertionError):
    """An expert that should be hosted somewhere is not."""


class PlacementViolation(EdgeMoEError, AssertionError):
    pass


class UpgradeUnavailableError(EdgeMoEError):
    pass


class ComparisonError(EdgeMoEError, ValueError):
    pass
