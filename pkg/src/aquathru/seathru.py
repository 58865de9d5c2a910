"""Inverse of the formation model: estimate water parameters, then undo them.

The chain is

1. backscatter: per range bin, take the darkest pixels in each channel and
   fit ``veil * (1 - exp(-beta_b * z))`` to them;
2. local illuminant: diffuse the backscatter-free (direct) signal over a
   4-neighbourhood and scale it by a gray-world factor;
3. attenuation: ``beta_d = -log(illuminant) / z``, summarised per range
   bin by the median;
4. restoration: ``J = (I - backscatter(z)) * exp(beta_d * z)``.

:func:`enhance` runs the chain on a range map predicted by the attenuation
prior instead of a measured one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import kvconfig
from ._validation import as_range, as_rgb, check_same_shape, check_triplet
from .formation import CHANNELS, WaterParams
from .lm import NumericFailure, multistart
from .raster_io import RangeMap, RgbImage
from .ulap import UlapCoefficients, ulap_range

N_BINS = 10
DARK_FRACTION = 0.01
MIN_BIN_PIXELS = 5
MIN_USABLE_BINS = 3
VEIL_STARTS = (0.1, 0.5, 0.9)
BETA_B_STARTS = (0.1, 1.0, 4.0)
VEIL_BOUNDS = (0.0, 1.0)
BETA_B_BOUNDS = (0.0, 10.0)
DIRECT_FLOOR = 1e-4
Z_FLOOR = 0.05
FLAT_RTOL = 1e-12  # predicted range spread below this (relative) counts as flat


class InsufficientRangeDiversity(ValueError):
    pass


class EmptyEstimateError(ValueError):
    pass


__all__ = [
    "AttenuationEstimate",
    "BackscatterFit",
    "EmptyEstimateError",
    "IlluminantMap",
    "InsufficientRangeDiversity",
    "NumericFailure",
    "SeaThruRestorer",
    "direct_signal",
    "enhance",
    "estimate_attenuation",
    "estimate_backscatter",
    "estimate_illuminant",
    "restore",
    "restore_from_range",
]


# ---------------------------------------------------------------------------
# range bins

def bin_edges(range_map: RangeMap, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-width bin edges spanning the valid range values."""
    z = range_map.data[range_map.valid]
    if z.size < n_bins:
        raise InsufficientRangeDiversity(
            f"need at least {n_bins} valid range pixels, got {z.size}"
        )
    lo, hi = float(z.min()), float(z.max())
    if not hi > lo:
        raise InsufficientRangeDiversity(f"range is constant ({lo} m); cannot form bins")
    return np.linspace(lo, hi, n_bins + 1)


def assign_bins(z: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index per value; values beyond the outer edges go to the end bins."""
    n = len(edges) - 1
    return np.clip(np.searchsorted(edges, z, side="right") - 1, 0, n - 1)


# ---------------------------------------------------------------------------
# backscatter

@dataclass(frozen=True, eq=False)
class BackscatterFit:
    """Per-channel veiling light and backscatter rate, with fit diagnostics."""

    veil: np.ndarray
    beta_b: np.ndarray
    residual_rmse: np.ndarray = field(default_factory=lambda: np.zeros(3))
    counts: np.ndarray | None = None
    edges: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "veil", check_triplet(self.veil, "veil", 0.0, 1.0))
        object.__setattr__(self, "beta_b", check_triplet(self.beta_b, "beta_b", 0.0))
        object.__setattr__(self, "residual_rmse", check_triplet(self.residual_rmse, "residual_rmse", 0.0))

    @classmethod
    def from_params(cls, params: WaterParams) -> "BackscatterFit":
        return cls(params.veil, params.beta_b)

    def backscatter(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)[..., None]
        return self.veil * -np.expm1(-self.beta_b * z)

    def to_config(self) -> dict:
        out: dict = {}
        for i, ch in enumerate(CHANNELS):
            out[f"veil_{ch}"] = float(self.veil[i])
            out[f"beta_b_{ch}"] = float(self.beta_b[i])
            out[f"rmse_{ch}"] = float(self.residual_rmse[i])
            if self.counts is not None:
                out[f"counts_{ch}"] = [int(c) for c in self.counts[i]]
        if self.edges is not None:
            out["edges"] = [float(e) for e in self.edges]
        return out

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "BackscatterFit":
        allowed = {f"{k}_{c}" for k in ("veil", "beta_b", "rmse", "counts") for c in CHANNELS} | {"edges"}
        kvconfig.check_keys(cfg, allowed)
        veil = [kvconfig.get_float(cfg, f"veil_{c}") for c in CHANNELS]
        beta = [kvconfig.get_float(cfg, f"beta_b_{c}") for c in CHANNELS]
        rmse = [kvconfig.get_float(cfg, f"rmse_{c}") if f"rmse_{c}" in cfg else 0.0 for c in CHANNELS]
        counts = None
        if all(f"counts_{c}" in cfg for c in CHANNELS):
            counts = np.array([[int(v) for v in kvconfig.get_floats(cfg, f"counts_{c}")] for c in CHANNELS])
        edges = np.array(kvconfig.get_floats(cfg, "edges")) if "edges" in cfg else None
        return cls(veil, beta, rmse, counts, edges)


def _dark_points(img: np.ndarray, z: np.ndarray, bins: np.ndarray, n_bins: int,
                 dark_fraction: float, min_pixels: int):
    """Darkest pixels per bin and channel: returns [(z_sel, v_sel)] per channel and counts."""
    pts = [([], []) for _ in range(3)]
    counts = np.zeros((3, n_bins), dtype=np.int64)
    for b in range(n_bins):
        in_bin = bins == b
        n = int(in_bin.sum())
        if n < min_pixels:
            continue
        k = max(int(np.ceil(dark_fraction * n)), min_pixels)
        zb = z[in_bin]
        for c in range(3):
            vb = img[in_bin, c]
            # ties broken on range so the choice depends only on the pixel set
            order = np.lexsort((zb, vb))[:k]
            pts[c][0].append(zb[order])
            pts[c][1].append(vb[order])
            counts[c, b] = k
    return [(np.concatenate(zs) if zs else np.empty(0), np.concatenate(vs) if vs else np.empty(0))
            for zs, vs in pts], counts


def fit_backscatter_curve(z: np.ndarray, v: np.ndarray):
    """Bounded multi-start fit of ``veil * (1 - exp(-beta * z))`` to points."""

    def residual(x):
        return x[0] * -np.expm1(-x[1] * z) - v

    def jacobian(x):
        e = np.exp(-x[1] * z)
        return np.column_stack([1.0 - e, x[0] * z * e])

    starts = [(b, r) for b in VEIL_STARTS for r in BETA_B_STARTS]
    lower = (VEIL_BOUNDS[0], BETA_B_BOUNDS[0])
    upper = (VEIL_BOUNDS[1], BETA_B_BOUNDS[1])
    res = multistart(residual, jacobian, starts, lower, upper)
    if res.x[1] == 0.0:
        # a zero rate makes the curve vanish for any veil; report the veil as 0
        res.x = np.array([0.0, 0.0])
    return res


def estimate_backscatter(img, range_map, *, n_bins: int = N_BINS, dark_fraction: float = DARK_FRACTION,
                         min_pixels: int = MIN_BIN_PIXELS, n_jobs: int = 1) -> BackscatterFit:
    """Fit veiling light and backscatter rate per channel from dark pixels.

    Valid pixels are split into ``n_bins`` equal-width range bins. In each
    bin the darkest ``dark_fraction`` of pixels (at least ``min_pixels``,
    bins with fewer pixels are skipped) are taken per channel, and the
    saturating backscatter curve is fit to all selected points by bounded
    Levenberg-Marquardt from a 3 x 3 grid of starts.

    Raises:
        InsufficientRangeDiversity: fewer than 3 bins had enough pixels, or
            the range is constant.
        NumericFailure: every start diverged for some channel.
    """
    img, range_map = as_rgb(img), as_range(range_map)
    check_same_shape(img, range_map)
    edges = bin_edges(range_map, n_bins)
    valid = range_map.valid
    z = range_map.data[valid]
    pixels = img.data[valid]
    bins = assign_bins(z, edges)
    points, counts = _dark_points(pixels, z, bins, n_bins, dark_fraction, min_pixels)
    usable = int((counts[0] > 0).sum())
    if usable < MIN_USABLE_BINS:
        raise InsufficientRangeDiversity(
            f"only {usable} range bins hold >= {min_pixels} pixels; need {MIN_USABLE_BINS}"
        )

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=min(n_jobs, 3)) as pool:
            fits = list(pool.map(lambda p: fit_backscatter_curve(*p), points))
    else:
        fits = [fit_backscatter_curve(*p) for p in points]

    veil = np.array([f.x[0] for f in fits])
    beta = np.array([f.x[1] for f in fits])
    rmse = np.array([np.sqrt(2.0 * f.cost / len(p[0])) for f, p in zip(fits, points)])
    return BackscatterFit(veil, beta, rmse, counts, edges)


def direct_signal(img, range_map, bs: BackscatterFit) -> RgbImage:
    """Backscatter-free signal ``I - B(z)``, floored at a small positive value."""
    img, range_map = as_rgb(img), as_range(range_map)
    check_same_shape(img, range_map)
    d = img.data - bs.backscatter(range_map.data)
    return RgbImage(np.clip(d, DIRECT_FLOOR, 1.0))


# ---------------------------------------------------------------------------
# illuminant

@dataclass(frozen=True, eq=False)
class IlluminantMap:
    """Per-pixel, per-channel local illuminant, strictly positive."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"IlluminantMap needs shape (H, W, 3), got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a <= 0.0) or np.any(a > 1.0):
            raise ValueError("illuminant values must lie in (0, 1]")
        object.__setattr__(self, "data", a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


def _neighbour_mean(a: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Mean over the valid 4-neighbours of each pixel (no wrap-around)."""
    total = np.zeros_like(a)
    count = np.zeros(weight.shape, dtype=np.float64)
    aw = a * weight[..., None]
    total[1:] += aw[:-1]
    count[1:] += weight[:-1]
    total[:-1] += aw[1:]
    count[:-1] += weight[1:]
    total[:, 1:] += aw[:, :-1]
    count[:, 1:] += weight[:, :-1]
    total[:, :-1] += aw[:, 1:]
    count[:, :-1] += weight[:, 1:]
    return total, count


def estimate_illuminant(direct, range_map, p: float = 0.01, *, n_iter: int = 50,
                        gray_world: float = 2.0) -> IlluminantMap:
    """Local space-average colour of the direct signal, scaled to an illuminant.

    Starting from the direct signal itself, each of ``n_iter`` sweeps sets
    ``a = (1 - p) * mean(4-neighbours of a) + p * direct``. Pixels with
    invalid range neither contribute to nor receive the average (they keep
    their own direct value). The illuminant is ``gray_world * a`` clipped
    to (0, 1].
    """
    direct, range_map = as_rgb(direct), as_range(range_map)
    check_same_shape(direct, range_map)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    d = np.maximum(direct.data, DIRECT_FLOOR)
    valid = range_map.valid.astype(np.float64)
    a = d.copy()
    for _ in range(n_iter):
        total, count = _neighbour_mean(a, valid)
        has = count > 0
        mean = np.where(has[..., None], total / np.maximum(count, 1.0)[..., None], a)
        a = np.where(valid[..., None] > 0, (1.0 - p) * mean + p * d, d)
    return IlluminantMap(np.clip(gray_world * a, DIRECT_FLOOR, 1.0))


# ---------------------------------------------------------------------------
# attenuation

@dataclass(frozen=True, eq=False)
class AttenuationEstimate:
    """Direct-signal attenuation rate, either per pixel or per range bin.

    ``values`` is (H, W, 3) in ``"pixel"`` mode and (n_bins, 3) in
    ``"binned"`` mode, where ``edges`` gives the bin boundaries in meters.
    """

    mode: str
    values: np.ndarray
    edges: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if self.mode not in ("pixel", "binned"):
            raise ValueError(f"mode must be 'pixel' or 'binned', got {self.mode!r}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("attenuation values must be finite and >= 0")
        if self.mode == "binned":
            if v.ndim != 2 or v.shape[1] != 3:
                raise ValueError("binned attenuation needs shape (n_bins, 3)")
            if self.edges is None or len(self.edges) != len(v) + 1:
                raise ValueError("binned attenuation needs n_bins + 1 edges")
        elif v.ndim != 3 or v.shape[2] != 3:
            raise ValueError("per-pixel attenuation needs shape (H, W, 3)")
        object.__setattr__(self, "values", v)
        if self.edges is not None:
            object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.float64))

    @classmethod
    def uniform(cls, beta_d, shape) -> "AttenuationEstimate":
        beta = check_triplet(beta_d, "beta_d", 0.0)
        return cls("pixel", np.broadcast_to(beta, (*shape, 3)).copy())

    def beta_at(self, z: np.ndarray) -> np.ndarray:
        if self.mode == "pixel":
            if self.values.shape[:2] != z.shape:
                raise ValueError(f"attenuation raster {self.values.shape[:2]} does not match {z.shape}")
            return self.values
        return self.values[assign_bins(z, self.edges)]

    def to_config(self) -> dict:
        if self.mode != "binned":
            raise ValueError("only binned attenuation estimates serialise to a key-value config")
        out: dict = {"mode": "binned", "edges": [float(e) for e in self.edges]}
        for i, ch in enumerate(CHANNELS):
            out[f"beta_d_{ch}"] = [float(v) for v in self.values[:, i]]
        return out

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "AttenuationEstimate":
        kvconfig.check_keys(cfg, {"mode", "edges"} | {f"beta_d_{c}" for c in CHANNELS})
        if cfg.get("mode") != "binned":
            raise kvconfig.ConfigError("attenuation config must have mode=binned")
        cols = [kvconfig.get_floats(cfg, f"beta_d_{c}") for c in CHANNELS]
        return cls("binned", np.column_stack(cols), np.array(kvconfig.get_floats(cfg, "edges")))


def estimate_attenuation(illum: IlluminantMap, range_map, mode: str = "binned", *,
                         edges: np.ndarray | None = None, n_bins: int = N_BINS,
                         z_floor: float = Z_FLOOR) -> AttenuationEstimate:
    """Attenuation rate ``-log(illuminant) / z`` at pixels farther than ``z_floor``.

    In ``"binned"`` mode the per-pixel rates are reduced to a median per
    range bin. ``edges`` defaults to the same equal-width bins that
    :func:`estimate_backscatter` uses; bins without any estimate borrow the
    nearest populated bin's value.
    """
    range_map = as_range(range_map)
    check_same_shape(illum, range_map)
    z = range_map.data
    usable = range_map.valid & (z > z_floor)
    if not usable.any():
        raise EmptyEstimateError(f"no valid pixel lies beyond z_floor={z_floor} m")
    beta = np.zeros_like(illum.data)
    beta[usable] = -np.log(illum.data[usable]) / z[usable][:, None]
    beta = np.maximum(beta, 0.0)
    if mode == "pixel":
        return AttenuationEstimate("pixel", beta)
    if mode != "binned":
        raise ValueError(f"mode must be 'pixel' or 'binned', got {mode!r}")

    if edges is None:
        edges = bin_edges(range_map, n_bins)
    n = len(edges) - 1
    bins = assign_bins(z[usable], edges)
    samples = beta[usable]
    values = np.full((n, 3), np.nan)
    for b in range(n):
        sel = bins == b
        if sel.any():
            values[b] = np.median(samples[sel], axis=0)
    filled = np.flatnonzero(~np.isnan(values[:, 0]))
    for b in np.flatnonzero(np.isnan(values[:, 0])):
        values[b] = values[filled[np.argmin(np.abs(filled - b))]]
    return AttenuationEstimate("binned", values, edges)


# ---------------------------------------------------------------------------
# restoration

@dataclass(frozen=True)
class RestoreReport:
    clamped_fraction: float
    clamped_mask: np.ndarray


def restore(img, range_map, bs: BackscatterFit, att: AttenuationEstimate) -> tuple[RgbImage, RestoreReport]:
    """Remove backscatter and undo attenuation: ``(I - B(z)) * exp(beta_d * z)``.

    Output is clamped to [0, 1]. Pixels with invalid range pass through
    unchanged. The report gives the fraction of valid pixels that needed
    clamping and their mask.
    """
    img, range_map = as_rgb(img), as_range(range_map)
    check_same_shape(img, range_map)
    z = range_map.data
    out = (img.data - bs.backscatter(z)) * np.exp(att.beta_at(z) * z[..., None])
    valid = range_map.valid
    clamped = np.any((out < 0.0) | (out > 1.0), axis=2) & valid
    out = np.clip(out, 0.0, 1.0)
    out[~valid] = img.data[~valid]
    n_valid = int(valid.sum())
    frac = float(clamped.sum() / n_valid) if n_valid else 0.0
    return RgbImage(out), RestoreReport(frac, clamped)


@dataclass
class ChainReport:
    """Intermediate products of one restoration run."""

    backscatter: BackscatterFit | None
    illuminant: IlluminantMap | None
    attenuation: AttenuationEstimate | None
    restore: RestoreReport | None
    range_map: RangeMap | None = None
    passthrough: bool = False


def restore_from_range(img, range_map, *, n_bins: int = N_BINS, dark_fraction: float = DARK_FRACTION,
                       p: float = 0.01, n_iter: int = 50, gray_world: float = 2.0,
                       z_floor: float = Z_FLOOR, n_jobs: int = 1) -> tuple[RgbImage, ChainReport]:
    """Estimate every water parameter from ``img`` and ``range_map`` and restore."""
    img, range_map = as_rgb(img), as_range(range_map)
    bs = estimate_backscatter(img, range_map, n_bins=n_bins, dark_fraction=dark_fraction, n_jobs=n_jobs)
    direct = direct_signal(img, range_map, bs)
    illum = estimate_illuminant(direct, range_map, p, n_iter=n_iter, gray_world=gray_world)
    att = estimate_attenuation(illum, range_map, "binned", edges=bs.edges, z_floor=z_floor)
    out, rep = restore(img, range_map, bs, att)
    return out, ChainReport(bs, illum, att, rep, range_map)


def enhance(img, coeffs: UlapCoefficients, scale: float = 1.0, **chain_kw) -> tuple[RgbImage, ChainReport]:
    """Restore an image using a range map predicted by the attenuation prior.

    The prior's relative range is multiplied by ``scale`` (meters per unit)
    and fed to :func:`restore_from_range`. When the predicted range is
    flat (spread within rounding) there is no range cue to invert; the image is returned
    unchanged with ``report.passthrough`` set. Any other failure propagates.
    """
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    img = as_rgb(img)
    rel = ulap_range(img, coeffs)
    range_map = RangeMap(rel.data * scale)
    z = range_map.data
    if np.ptp(z) <= FLAT_RTOL * max(1.0, float(np.max(np.abs(z)))):
        return img, ChainReport(None, None, None, None, range_map, passthrough=True)
    out, report = restore_from_range(img, range_map, **chain_kw)
    return out, report


class SeaThruRestorer(TransformerMixin, BaseEstimator):
    """Estimator form of the restoration chain.

    ``fit(X, range_map)`` estimates backscatter, illuminant and binned
    attenuation from an (H, W, 3) image; ``transform(X, range_map=None)``
    restores ``X`` with the fitted parameters, reusing the fit-time range
    map when none is given. ``fit_transform(X, range_map)`` therefore
    restores the image it was fit on.
    """

    def __init__(self, n_bins=N_BINS, dark_fraction=DARK_FRACTION, p=0.01, n_iter=50,
                 gray_world=2.0, z_floor=Z_FLOOR, n_jobs=1):
        self.n_bins = n_bins
        self.dark_fraction = dark_fraction
        self.p = p
        self.n_iter = n_iter
        self.gray_world = gray_world
        self.z_floor = z_floor
        self.n_jobs = n_jobs

    def fit(self, X, range_map):
        img, rng = as_rgb(X), as_range(range_map)
        self.backscatter_ = estimate_backscatter(
            img, rng, n_bins=self.n_bins, dark_fraction=self.dark_fraction, n_jobs=self.n_jobs
        )
        direct = direct_signal(img, rng, self.backscatter_)
        self.illuminant_ = estimate_illuminant(direct, rng, self.p, n_iter=self.n_iter, gray_world=self.gray_world)
        self.attenuation_ = estimate_attenuation(
            self.illuminant_, rng, "binned", edges=self.backscatter_.edges, z_floor=self.z_floor
        )
        self.range_map_ = rng
        return self

    def transform(self, X, range_map=None):
        check_is_fitted(self, "attenuation_")
        rng = self.range_map_ if range_map is None else as_range(range_map)
        out, self.report_ = restore(X, rng, self.backscatter_, self.attenuation_)
        return out.data
