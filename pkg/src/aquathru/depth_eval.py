"""Depth supervision masks, scene manifests, evaluation sampling and metrics.

Manifest JSON (one document per scene)::

    {
      "schema": 1,
      "scene_id": "reef01",
      "samples": [
        {
          "id": "0001",
          "rgb": "rgb/0001.ppm",
          "enhanced": "enh/0001.ppm",
          "depth": "depth/0001.pfm",
          "confidence": "conf/0001.pfm",
          "mask": "mask/0001.pgm",          # null until masks are built
          "K": [[fx, 0, cx], [0, fy, cy], [0, 0, 1]],   # optional
          "pose": [[...4 x 4...]],                       # optional
          "quality": true,
          "coverage": 0.83                  # null until masks are built
        }
      ]
    }

Relative paths resolve against the manifest's own directory.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import as_confidence, as_mask, as_range, check_same_shape
from .raster_io import DepthMask

SCHEMA_VERSION = 1
PRED_FLOOR = 1e-3
CSV_COLUMNS = ("Abs Rel", "Sq Rel", "RMSE", "RMSElog", "delta<1.25", "delta<1.25^2", "delta<1.25^3")

# Corpus statistics of the reference dataset build, kept as a fixture for
# manifest-statistics tests rather than regenerated.
REFERENCE_CORPUS = {
    "scenes_collected": 36,
    "scenes_bad_pose": 8,
    "scenes_bad_render": 17,
    "scenes_retained": 11,
    "views_per_scene": 240,
    "samples_retained": 2131,
}


class ManifestError(ValueError):
    pass


class AllSamplesRejected(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masks

def confidence_to_mask(conf, tau: float = 0.5) -> DepthMask:
    """Pixels with confidence ``>= tau``; ``mask.coverage`` is the kept fraction."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    conf = as_confidence(conf)
    return DepthMask(conf.data >= tau)


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class SampleRecord:
    id: str
    rgb: str
    enhanced: str | None = None
    depth: str | None = None
    confidence: str | None = None
    mask: str | None = None
    K: list | None = None
    pose: list | None = None
    quality: bool = True
    coverage: float | None = None

    def __post_init__(self):
        paths = [p for p in (self.rgb, self.enhanced, self.depth, self.confidence, self.mask) if p]
        if len(set(paths)) != len(paths):
            raise ManifestError(f"sample {self.id!r}: file paths must be distinct")
        if self.K is not None:
            K = np.asarray(self.K, dtype=np.float64)
            if K.shape != (3, 3) or not np.all(np.isfinite(K)):
                raise ManifestError(f"sample {self.id!r}: K must be a finite 3x3 matrix")
            if np.any(np.tril(K, -1) != 0) or np.any(np.diag(K) <= 0):
                raise ManifestError(f"sample {self.id!r}: K must be upper triangular with positive diagonal")
        if self.pose is not None:
            E = np.asarray(self.pose, dtype=np.float64)
            if E.shape != (4, 4) or not np.all(np.isfinite(E)):
                raise ManifestError(f"sample {self.id!r}: pose must be a finite 4x4 matrix")
            R = E[:3, :3]
            if not np.allclose(R.T @ R, np.eye(3), rtol=0, atol=1e-6):
                raise ManifestError(f"sample {self.id!r}: pose rotation block is not orthonormal")
        if self.coverage is not None and not 0.0 <= self.coverage <= 1.0:
            raise ManifestError(f"sample {self.id!r}: coverage must lie in [0, 1]")


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    samples: tuple[SampleRecord, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"scene {self.scene_id!r}: duplicate sample ids")
        rgbs = [s.rgb for s in self.samples]
        if len(set(rgbs)) != len(rgbs):
            raise ManifestError(f"scene {self.scene_id!r}: duplicate rgb paths")

    def __len__(self) -> int:
        return len(self.samples)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_json(self) -> str:
        doc = {
            "schema": SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "samples": [asdict(s) for s in self.samples],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, root=None) -> "SceneManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ManifestError("manifest must be a JSON object")
        if doc.get("schema") != SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema {doc.get('schema')!r}")
        unknown = set(doc) - {"schema", "scene_id", "samples"}
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        if not isinstance(doc.get("scene_id"), str) or not isinstance(doc.get("samples"), list):
            raise ManifestError("manifest needs a string scene_id and a samples list")
        allowed = set(SampleRecord.__dataclass_fields__)
        samples = []
        for i, rec in enumerate(doc["samples"]):
            if not isinstance(rec, dict) or "rgb" not in rec:
                raise ManifestError(f"sample {i}: must be an object with an rgb path")
            extra = set(rec) - allowed
            if extra:
                raise ManifestError(f"sample {i}: unknown keys {sorted(extra)}")
            rec = dict(rec)
            rec.setdefault("id", Path(rec["rgb"]).stem)
            try:
                samples.append(SampleRecord(**rec))
            except TypeError as e:
                raise ManifestError(f"sample {i}: {e}") from None
        return cls(doc["scene_id"], samples, Path(root) if root is not None else None)

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        return cls.from_json(path.read_text(encoding="utf-8"), root=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


@dataclass(frozen=True)
class DropRecord:
    scene_id: str
    sample_id: str
    coverage: float | None
    reason: str


def filter_scene(manifest: SceneManifest, min_coverage: float = 0.3) -> tuple[SceneManifest, list[DropRecord]]:
    """Drop samples whose mask coverage is below ``min_coverage``.

    Every sample must already carry a coverage value.

    Raises:
        ManifestError: a sample has no coverage yet.
        AllSamplesRejected: nothing survives.
    """
    kept, log = [], []
    for s in manifest.samples:
        if s.coverage is None:
            raise ManifestError(f"sample {s.id!r} has no mask coverage; build masks first")
        if s.coverage < min_coverage:
            log.append(DropRecord(manifest.scene_id, s.id, s.coverage,
                                  f"coverage {s.coverage:.4f} < {min_coverage}"))
        else:
            kept.append(s)
    if not kept:
        raise AllSamplesRejected(f"scene {manifest.scene_id!r}: all {len(manifest)} samples rejected")
    return replace(manifest, samples=tuple(kept)), log


# ---------------------------------------------------------------------------
# evaluation sampling

@dataclass(frozen=True)
class SampleRef:
    scene_id: str
    index: int
    record: SampleRecord


def proportional_quotas(sizes, n: int) -> list[int]:
    """Largest-remainder apportionment of ``n`` over groups of the given sizes.

    Ties in the fractional part go to the earlier group.
    """
    total = sum(sizes)
    if n > total:
        raise ValueError(f"cannot draw {n} samples from a pool of {total}")
    if total == 0:
        return [0] * len(sizes)
    exact = [n * s / total for s in sizes]
    quotas = [math.floor(e) for e in exact]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[: n - sum(quotas)]:
        quotas[i] += 1
    return quotas


def sample_eval_set(manifests, n: int, seed: int = 42) -> list[SampleRef]:
    """Stratified, seeded draw of ``n`` evaluation samples.

    Each scene gets a quota proportional to its size; within a scene the
    quota is drawn uniformly without replacement using a PCG64 stream keyed
    on ``(seed, scene position)``. Selected samples come back in manifest
    order.
    """
    manifests = list(manifests)
    sizes = [len(m) for m in manifests]
    quotas = proportional_quotas(sizes, n)
    out = []
    for pos, (m, q) in enumerate(zip(manifests, quotas)):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, pos])))
        picked = sorted(int(i) for i in rng.choice(len(m), size=q, replace=False)) if q else []
        out.extend(SampleRef(m.scene_id, i, m.samples[i]) for i in picked)
    return out


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def as_tuple(self) -> tuple[float, ...]:
        return (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3)


def _masked_pairs(pred, gt, mask):
    pred, gt = as_range(pred), as_range(gt)
    check_same_shape(pred, gt)
    m = as_mask(mask, gt.shape).data
    if not m.any():
        raise EmptyMaskError("mask selects no pixels; metrics are undefined")
    if not np.all(gt.valid[m]) or np.any(gt.data[m] <= 0):
        raise ValueError("ground truth must be valid and > 0 on every masked pixel")
    if not np.all(pred.valid[m]):
        raise ValueError("prediction must be valid on every masked pixel")
    return np.maximum(pred.data[m], PRED_FLOOR), gt.data[m]


def compute_metrics(pred, gt, mask) -> MetricsReport:
    """Standard monocular depth error suite over the masked pixels.

    Predictions are floored at 1e-3 m first. The delta accuracies use a
    strict ``max(p/g, g/p) < 1.25**k``.
    """
    p, g = _masked_pairs(pred, gt, mask)
    diff = p - g

    def within(t):
        # max(p/g, g/p) < t without the division, which can round across t
        return float(np.mean((p < t * g) & (g < t * p)))

    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=within(1.25),
        delta2=within(1.25**2),
        delta3=within(1.25**3),
        n_pixels=int(p.size),
    )


def abs_rel_error_map(pred, gt, mask) -> np.ndarray:
    """Per-pixel ``|p - g| / g`` with 0 outside the mask (for heatmaps)."""
    pred, gt = as_range(pred), as_range(gt)
    m = as_mask(mask, gt.shape).data & gt.valid & (gt.data > 0)
    p = np.maximum(pred.data, PRED_FLOOR)
    out = np.zeros(gt.shape)
    out[m] = np.abs(p[m] - gt.data[m]) / gt.data[m]
    return out


def metrics_csv(rows) -> str:
    """CSV text for ``(sample_name, MetricsReport)`` rows with a fixed header."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("sample", *CSV_COLUMNS, "pixels"))
    for name, rep in rows:
        writer.writerow((name, *(repr(v) for v in rep.as_tuple()), rep.n_pixels))
    return buf.getvalue()
