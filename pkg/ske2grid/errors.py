"""Exception types raised across the package.

Everything derives from :class:`Ske2GridError` so the CLI can map failures to
exit codes in one place: configuration problems exit with 2, everything else
with 1.
"""

from typing import Optional, Sequence


class Ske2GridError(Exception):
    """Base class for all package errors."""


class ConfigError(Ske2GridError, ValueError):
    """Invalid configuration value; ``key`` names the offending setting when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class DimensionError(Ske2GridError, ValueError):
    """Operand shapes (or dtypes) do not agree."""


class NonFiniteError(Ske2GridError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.epoch = epoch
        self.step = step


class DataError(Ske2GridError, ValueError):
    """Input data violates an invariant (bad label, NaN coordinate, ...)."""


class FormatError(Ske2GridError, ValueError):
    """A binary file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LoadError(Ske2GridError):
    """A checkpoint cannot be applied to the target model."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(f"{name}: {message}" if name else message)
        self.name = name


class GradCheckError(Ske2GridError):
    """Finite-difference check hit a non-finite value."""

    def __init__(self, message: str, coordinate: Optional[Sequence[int]] = None):
        if coordinate is not None:
            message = f"{message} at coordinate {tuple(int(c) for c in coordinate)}"
        super().__init__(message)
        self.coordinate = tuple(coordinate) if coordinate is not None else None
