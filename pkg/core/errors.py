"""
Exceptions raised by SandHUM
"""

from typing import List, Optional, Sequence


class SandhumError(Exception):
    """Base class for all SandHUM errors"""


class ValidationError(SandhumError):
    """A layer stack or experiment block failed validation"""

    def __init__(self, diagnostics: Sequence[str]):
        self.diagnostics = list(diagnostics)
        super().__init__('; '.join(self.diagnostics) or 'validation failed')


class ConfigError(SandhumError):
    """Configuration file is missing, unreadable or inconsistent"""

    def __init__(self, message: str, unreadable: bool = False):
        self.unreadable = unreadable
        super().__init__(message)


class AssemblyError(SandhumError):
    """Discrete operators could not be assembled"""


class InputGridError(SandhumError):
    """Sampled inputs do not match the integration grid"""


class MissingChannelError(SandhumError):
    """A trajectory lacks a trace channel needed by the caller"""


class UnsupportedTraceError(SandhumError):
    """Requested trace or energy is not defined for this boundary family"""


class SolverError(SandhumError):
    """Linear solve, eigensolver or Krylov iteration failed"""

    def __init__(self, message: str, residual_history: Optional[List[float]] = None,
                 indices: Optional[List[int]] = None):
        self.residual_history = list(residual_history or [])
        self.indices = list(indices or [])
        super().__init__(message)


class CoercivityError(SolverError):
    """The HUM Gramian is not coercive on the requested band"""
