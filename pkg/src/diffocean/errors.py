"""Exception hierarchy shared across the package."""


class DiffOceanError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffOceanError, ValueError):
    """Operands have incompatible shapes for a primitive or operator."""

    def __init__(self, primitive, *shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(DiffOceanError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(DiffOceanError, ValueError):
    """Malformed dataset, split, or statistics."""


class NumericalError(DiffOceanError, FloatingPointError):
    """A computation produced non-finite values.

    ``where`` names the branch or stage, ``substep`` and ``channel`` are set
    when the failure location is known.
    """

    def __init__(self, message, where=None, substep=None, channel=None):
        self.where = where
        self.substep = substep
        self.channel = channel
        super().__init__(message)


class CFLError(NumericalError):
    """Explicit diffusion stability guard violated."""
