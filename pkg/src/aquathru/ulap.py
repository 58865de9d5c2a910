"""Underwater light attenuation prior: relative range from colour alone.

Red light dies off faster with distance than green or blue, so the gap
between ``max(B, G)`` and ``R`` tracks range. The prior is the affine map

    d(x) = mu0 + mu1 * max(B(x), G(x)) + mu2 * R(x)

and its three coefficients are fit by ordinary least squares against
supervised range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import kvconfig
from ._validation import as_mask, as_range, as_rgb, check_same_shape
from .raster_io import RangeMap

_DIRECTIONS = ("intercept", "max(B,G)", "R")


class DegenerateFitError(ValueError):
    """The normal matrix is rank deficient; ``direction`` is the null vector."""

    def __init__(self, message: str, direction: np.ndarray):
        super().__init__(message)
        self.direction = direction


@dataclass(frozen=True)
class UlapCoefficients:
    mu0: float
    mu1: float
    mu2: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.as_array()):
            raise ValueError("ULAP coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu0, self.mu1, self.mu2], dtype=np.float64)

    def to_config(self) -> dict[str, float]:
        return {"mu0": float(self.mu0), "mu1": float(self.mu1), "mu2": float(self.mu2)}

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "UlapCoefficients":
        kvconfig.check_keys(cfg, ("mu0", "mu1", "mu2"))
        return cls(*(kvconfig.get_float(cfg, k) for k in ("mu0", "mu1", "mu2")))

    @classmethod
    def load(cls, path) -> "UlapCoefficients":
        return cls.from_config(kvconfig.read(path))

    def save(self, path) -> None:
        kvconfig.write(path, self.to_config())


@dataclass(frozen=True)
class UlapFitReport:
    rmse: float
    n_pixels: int


def ulap_features(rgb: np.ndarray) -> np.ndarray:
    """Design matrix ``[1, max(B, G), R]`` for an (..., 3) array of RGB rows."""
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    return np.column_stack([np.ones(len(rgb)), np.maximum(rgb[:, 2], rgb[:, 1]), rgb[:, 0]])


def _predict(rgb: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return mu[0] + mu[1] * np.maximum(rgb[..., 2], rgb[..., 1]) + mu[2] * rgb[..., 0]


def ulap_range(img, coeffs: UlapCoefficients) -> RangeMap:
    """Relative range map for ``img``; negative predictions are clamped to 0."""
    img = as_rgb(img)
    d = _predict(img.data, coeffs.as_array())
    return RangeMap(np.maximum(d, 0.0))


def _solve_normal(ata: np.ndarray, atb: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    # scale to unit diagonal so the rank test does not depend on units
    diag = np.sqrt(np.diag(ata))
    if np.any(diag == 0):
        k = int(np.argmin(diag))
        direction = np.eye(3)[k]
        raise DegenerateFitError(f"degenerate ULAP fit: no signal along {_DIRECTIONS[k]}", direction)
    scaled = ata / np.outer(diag, diag)
    evals, evecs = np.linalg.eigh(scaled)
    if evals[0] <= rtol * evals[-1]:
        v = evecs[:, 0] / diag
        v = v / np.linalg.norm(v)
        terms = " + ".join(f"{c:.3g}*{n}" for c, n in zip(v, _DIRECTIONS))
        raise DegenerateFitError(
            f"degenerate ULAP fit: normal matrix is rank deficient along {terms}", v
        )
    return np.linalg.solve(ata, atb)


def _accumulate(X: np.ndarray, y: np.ndarray):
    A = ulap_features(X)
    return A.T @ A, A.T @ y, len(y)


def fit_ulap(pairs, masks=None) -> tuple[UlapCoefficients, UlapFitReport]:
    """Least-squares ULAP coefficients from ``(image, range)`` pairs.

    Args:
        pairs: iterable of ``(RgbImage, RangeMap)`` (or arrays of matching
            shape).
        masks: optional sequence with one ``DepthMask`` (or None) per pair.
            Only pixels that are masked in *and* have valid range are used.

    Returns:
        The coefficients and a report with the residual RMSE and the number
        of pixels used.

    Raises:
        DegenerateFitError: fewer than 3 pixels, or the colours do not span
            the three regression directions (e.g. a constant image).
    """
    pairs = list(pairs)
    if masks is None:
        masks = [None] * len(pairs)
    if len(masks) != len(pairs):
        raise ValueError("need one mask entry per pair")

    ata = np.zeros((3, 3))
    atb = np.zeros(3)
    n = 0
    rows = []
    # per-image sums added in a fixed order keeps the result bit-stable
    for (img, rng), mask in zip(pairs, masks):
        img, rng = as_rgb(img), as_range(rng)
        check_same_shape(img, rng)
        sel = rng.valid.copy()
        if mask is not None:
            sel &= as_mask(mask, rng.shape).data
        X, y = img.data[sel], rng.data[sel]
        a, b, k = _accumulate(X, y)
        ata += a
        atb += b
        n += k
        rows.append((X, y))
    if n < 3:
        raise DegenerateFitError(f"degenerate ULAP fit: only {n} usable pixels", np.zeros(3))
    mu = _solve_normal(ata, atb)
    sse = sum(float(np.sum((_predict(X, mu) - y) ** 2)) for X, y in rows)
    return UlapCoefficients(*map(float, mu)), UlapFitReport(rmse=float(np.sqrt(sse / n)), n_pixels=n)


class UlapRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn regressor for the attenuation prior.

    ``X`` holds RGB rows of shape (n_pixels, 3), ``y`` the supervised range.
    Unlike :func:`ulap_range`, ``predict`` does not clamp, so ``score``
    reports the plain affine fit.
    """

    def __init__(self, clip_negative: bool = False):
        self.clip_negative = clip_negative

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[1] != 3:
            raise ValueError(f"expected 3 colour columns, got {X.shape[1]}")
        A = ulap_features(X)
        if sample_weight is not None:
            w = np.asarray(sample_weight, dtype=np.float64)
            Aw = A * w[:, None]
            mu = _solve_normal(A.T @ Aw, Aw.T @ y)
        else:
            if len(y) < 3:
                raise DegenerateFitError("degenerate ULAP fit: fewer than 3 samples", np.zeros(3))
            mu = _solve_normal(A.T @ A, A.T @ y)
        self.coef_ = mu[1:].copy()
        self.intercept_ = float(mu[0])
        self.coefficients_ = UlapCoefficients(*map(float, mu))
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "coefficients_")
        X = check_array(X, dtype=np.float64)
        d = _predict(X, self.coefficients_.as_array())
        return np.maximum(d, 0.0) if self.clip_negative else d
