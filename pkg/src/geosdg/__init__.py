"""Water and sanitation access estimation from satellite image tiles."""

from . import aggregate, dino, ingest, knn, numerics, vit
from .errors import (ConfigError, DegenerateFit, DegenerateIndex, FormatError, GeoSDGError,
                     IngestError, InvalidValue, NumericalError, ShapeError)

__version__ = "0.1.0"

__all__ = ["aggregate", "dino", "ingest", "knn", "numerics", "vit", "ConfigError", "DegenerateFit",
           "DegenerateIndex", "FormatError", "GeoSDGError", "IngestError", "InvalidValue",
           "NumericalError", "ShapeError"]
