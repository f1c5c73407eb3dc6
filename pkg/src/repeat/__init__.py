"""Registration-based partial liver volume change between paired breath-hold CT scans."""
from .errors import FoldingExceeded, RepeatError
from .volume_change import VolumeChangeReport, measure_partial_volume_change
from .volume_io import DeformationField, Geometry, ImageVolume, JacobianField, Kind

__version__ = "0.1.0"

__all__ = [
    "DeformationField",
    "FoldingExceeded",
    "Geometry",
    "ImageVolume",
    "JacobianField",
    "Kind",
    "RepeatError",
    "VolumeChangeReport",
    "measure_partial_volume_change",
]
