"""Input coercion shared by the functional API and the estimators.

Every public entry point accepts either the raster dataclass or a plain
ndarray of the right shape, so the algorithms slot into array-based
pipelines without wrapping by hand.
"""

from __future__ import annotations

import numpy as np

from .raster_io import ConfidenceMap, DepthMask, RangeMap, RgbImage


def as_rgb(x) -> RgbImage:
    if isinstance(x, RgbImage):
        return x
    return RgbImage(np.asarray(x, dtype=np.float64))


def as_range(x) -> RangeMap:
    if isinstance(x, RangeMap):
        return x
    return RangeMap(np.asarray(x, dtype=np.float64))


def as_confidence(x) -> ConfidenceMap:
    if isinstance(x, ConfidenceMap):
        return x
    return ConfidenceMap(np.asarray(x, dtype=np.float64))


def as_mask(x, shape=None) -> DepthMask:
    m = x if isinstance(x, DepthMask) else DepthMask(np.asarray(x))
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match raster shape {tuple(shape)}")
    return m


def check_same_shape(*rasters) -> tuple[int, int]:
    shapes = {tuple(r.shape) for r in rasters}
    if len(shapes) != 1:
        raise ValueError(f"raster dimensions differ: {sorted(shapes)}")
    return shapes.pop()


def check_triplet(values, name: str, lo: float = -np.inf, hi: float = np.inf) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} needs 3 per-channel values, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    if np.any(a < lo) or np.any(a > hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {a.tolist()}")
    return a
