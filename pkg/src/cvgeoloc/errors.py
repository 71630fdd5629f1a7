"""Exception hierarchy shared by every module."""


class GeolocError(Exception):
    pass


class ShapeError(GeolocError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ConfigError(GeolocError, ValueError):
    """A configuration value violates its contract."""


class InputError(GeolocError, ValueError):
    """User-supplied data (boxes, clicks, annotation lines) is invalid."""


class ContractError(GeolocError, TypeError):
    """A callable argument does not honour its calling contract."""


class VersionError(GeolocError):
    """Checkpoint or config file written by an incompatible format version."""
