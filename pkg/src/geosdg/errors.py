"""Exception hierarchy shared across the package."""


class GeoSDGError(Exception):
    """Base class for every error raised by geosdg."""


class ShapeError(GeoSDGError, ValueError):
    pass


class InvalidValue(GeoSDGError, ValueError):
    pass


class ConfigError(GeoSDGError, ValueError):
    pass


class NumericalError(GeoSDGError, ArithmeticError):
    """Non-finite values appeared during a forward pass or a training step."""

    def __init__(self, message: str, *, layer: int | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class FormatError(GeoSDGError, ValueError):
    """A file did not match its binary or CSV layout."""

    def __init__(self, message: str, *, offset: int | None = None, row: int | None = None):
        super().__init__(message)
        self.offset = offset
        self.row = row


class IngestError(GeoSDGError, IOError):
    def __init__(self, message: str, paths=()):
        self.paths = list(paths)
        if self.paths:
            message = f"{message}: {', '.join(str(p) for p in self.paths)}"
        super().__init__(message)


class DegenerateFit(GeoSDGError, ArithmeticError):
    pass


class DegenerateIndex(UserWarning):
    """Issued when a k-NN index carries labels from only one class."""
