"""Underwater image formation, Sea-thru style restoration and depth evaluation."""

from .formation import RaySamples, UnderwaterSynthesizer, WaterParams, segment_weights, synthesize
from .raster_io import ConfidenceMap, DepthMask, FormatError, RangeMap, RgbImage
from .seathru import (
    AttenuationEstimate,
    BackscatterFit,
    SeaThruRestorer,
    enhance,
    estimate_attenuation,
    estimate_backscatter,
    estimate_illuminant,
    restore,
    restore_from_range,
)
from .ulap import UlapCoefficients, UlapRegressor, fit_ulap, ulap_range

__version__ = "0.1.0"
