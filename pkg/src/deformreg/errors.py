"""Exception types shared across the package."""


class DeformregError(Exception):
    """Base class for all deformreg errors."""


class ShapeError(DeformregError):
    """Operands have incompatible shapes; the message reports all dimensions."""


class DataFormatError(DeformregError):
    """A file or in-memory record violates its format contract."""


class ConfigError(DeformregError):
    """A configuration document failed validation."""


class DivergenceError(DeformregError):
    """An optimization run exceeded its divergence guard."""
