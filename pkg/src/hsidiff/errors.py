"""Exception types shared across the toolkit."""


class HsidError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HsidError, ValueError):
    pass


class FormatError(HsidError, ValueError):
    """Malformed ENVI header or manifest; ``key`` names the offending field."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class SizeError(HsidError, ValueError):
    pass


class UnsupportedError(HsidError, ValueError):
    pass


class DimensionError(HsidError, ValueError):
    pass


class CoverageError(HsidError, ValueError):
    def __init__(self, message: str, coord: tuple[int, int, int]):
        super().__init__(message)
        self.coord = coord


class UndefinedMetricError(HsidError, ValueError):
    pass


class NonFiniteError(HsidError, FloatingPointError):
    """Non-finite value detected; ``where`` names the layer, parameter or step."""

    def __init__(self, message: str, where: str | int | None = None):
        super().__init__(message)
        self.where = where


class DivergenceError(HsidError, RuntimeError):
    pass


class InflationError(HsidError, ValueError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class CheckpointError(HsidError, ValueError):
    pass
