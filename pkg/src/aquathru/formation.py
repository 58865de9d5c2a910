"""Forward underwater image formation and volume-rendering segment weights.

The water column is modelled as homogeneous: each channel has one
attenuation rate for the direct signal and one for backscatter, so

    I_c = J_c * exp(-beta_d_c * z) + veil_c * (1 - exp(-beta_b_c * z))

Depth-varying coefficients are not modelled. This module is the ground
truth every inverse routine in :mod:`aquathru.seathru` is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import kvconfig
from ._validation import as_range, as_rgb, check_same_shape, check_triplet
from .raster_io import RgbImage

CHANNELS = ("r", "g", "b")
PRESETS = ("clear", "coastal", "turbid")


@dataclass(frozen=True, eq=False)
class WaterParams:
    """Per-channel veiling light, backscatter rate and attenuation rate (R, G, B)."""

    veil: np.ndarray
    beta_b: np.ndarray
    beta_d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "veil", check_triplet(self.veil, "veil", 0.0, 1.0))
        object.__setattr__(self, "beta_b", check_triplet(self.beta_b, "beta_b", 0.0))
        object.__setattr__(self, "beta_d", check_triplet(self.beta_d, "beta_d", 0.0))

    def to_config(self) -> dict[str, float]:
        out = {}
        for prefix, vals in (("veil", self.veil), ("beta_b", self.beta_b), ("beta_d", self.beta_d)):
            for ch, v in zip(CHANNELS, vals):
                out[f"{prefix}_{ch}"] = float(v)
        return out

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "WaterParams":
        keys = [f"{p}_{c}" for p in ("veil", "beta_b", "beta_d") for c in CHANNELS]
        kvconfig.check_keys(cfg, keys)
        vals = [kvconfig.get_float(cfg, k) for k in keys]
        return cls(vals[0:3], vals[3:6], vals[6:9])

    @classmethod
    def load(cls, path) -> "WaterParams":
        return cls.from_config(kvconfig.read(path))

    def save(self, path) -> None:
        kvconfig.write(path, self.to_config())

    @classmethod
    def preset(cls, name: str) -> "WaterParams":
        """Load one of the bundled demo presets (``clear``, ``coastal``, ``turbid``).

        The preset values are illustrative choices for tests and demos, not
        calibrated measurements of any real water body.
        """
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        text = resources.files("aquathru.presets").joinpath(f"{name}.cfg").read_text("utf-8")
        return cls.from_config(kvconfig.parse(text))


@dataclass(frozen=True)
class SynthesisReport:
    clamped_pixels: int
    invalid_pixels: int
    invalid_mask: np.ndarray
    clamped_mask: np.ndarray | None = None


def synthesize(clean, range_map, params: WaterParams) -> tuple[RgbImage, SynthesisReport]:
    """Degrade a clean image with the homogeneous-water formation model.

    Pixels whose range is invalid are copied through from ``clean`` and
    listed in the report. The result is clamped to [0, 1]; the number of
    pixels that needed clamping is reported so round-trip checks can skip
    them.
    """
    clean = as_rgb(clean)
    range_map = as_range(range_map)
    check_same_shape(clean, range_map)
    if not isinstance(params, WaterParams):
        raise TypeError("params must be a WaterParams")

    z = range_map.data[:, :, None]
    direct = clean.data * np.exp(-params.beta_d * z)
    backscatter = params.veil * -np.expm1(-params.beta_b * z)
    out = direct + backscatter
    clamped = np.any((out < 0.0) | (out > 1.0), axis=2)
    out = np.clip(out, 0.0, 1.0)
    invalid = ~range_map.valid
    out[invalid] = clean.data[invalid]
    clamped &= ~invalid
    report = SynthesisReport(int(clamped.sum()), int(invalid.sum()), invalid, clamped)
    return RgbImage(out), report


@dataclass(frozen=True, eq=False)
class RaySamples:
    """Densities and segment lengths along one ray."""

    sigma: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        delta = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        if sigma.shape != delta.shape:
            raise ValueError("sigma and delta must have equal length")
        if not (np.all(np.isfinite(sigma)) and np.all(np.isfinite(delta))):
            raise ValueError("ray samples must be finite")
        if np.any(sigma < 0):
            raise ValueError("sigma must be >= 0")
        if np.any(delta <= 0):
            raise ValueError("delta must be > 0")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "delta", delta)


def segment_weights(samples: RaySamples) -> np.ndarray:
    """Volume-rendering weight of each ray segment.

    ``w_i = T_i * (1 - exp(-sigma_i * delta_i))`` with transmittance
    ``T_i = exp(-sum_{j<i} sigma_j * delta_j)``. The weights telescope, so
    their sum is ``1 - exp(-sum sigma * delta)``.
    """
    optical = samples.sigma * samples.delta
    before = np.concatenate(([0.0], np.cumsum(optical)[:-1]))
    return np.exp(-before) * -np.expm1(-optical)


class UnderwaterSynthesizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`synthesize`.

    Parameters are per-channel triplets; ``preset`` fills any left as None.
    ``transform`` takes the clean image and the range map, ``fit`` is a
    no-op kept for pipeline compatibility.
    """

    def __init__(self, veil=None, beta_b=None, beta_d=None, preset="coastal"):
        self.veil = veil
        self.beta_b = beta_b
        self.beta_d = beta_d
        self.preset = preset

    def _params(self) -> WaterParams:
        base = WaterParams.preset(self.preset) if self.preset else None
        pick = lambda v, name: v if v is not None else getattr(base, name)  # noqa: E731
        if base is None and None in (self.veil, self.beta_b, self.beta_d):
            raise ValueError("give all three coefficient triplets or a preset")
        return WaterParams(pick(self.veil, "veil"), pick(self.beta_b, "beta_b"), pick(self.beta_d, "beta_d"))

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def transform(self, X, range_map):
        params = getattr(self, "params_", None) or self._params()
        image, self.report_ = synthesize(X, range_map, params)
        return image.data
