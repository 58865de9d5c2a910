"""``aquathru`` command line front end.

Exit status: 0 on success, 2 when an input fails validation, 1 when a
numeric stage fails. Failures print a single JSON line on stderr, e.g.
``{"error": "FormatError", "exit": 2, "message": "..."}``.

Set ``AQUATHRU_LOG`` to ``error`` (default), ``info`` or ``debug``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kvconfig, raster_io
from .depth_eval import (
    AllSamplesRejected,
    EmptyMaskError,
    ManifestError,
    SceneManifest,
    abs_rel_error_map,
    compute_metrics,
    confidence_to_mask,
    filter_scene,
    metrics_csv,
    sample_eval_set,
)
from .formation import PRESETS, WaterParams, synthesize
from .fusion import Probe, fuse, gradient_check
from .lm import NumericFailure
from .raster_io import DepthMask, FormatError
from .seathru import (
    EmptyEstimateError,
    InsufficientRangeDiversity,
    enhance,
    restore_from_range,
)
from .ulap import DegenerateFitError, UlapCoefficients, fit_ulap

log = logging.getLogger("aquathru")

HEATMAP_SCALE = 1.0
HEATMAP_NOTE = """\
quantity: absolute relative depth error |pred - gt| / gt
encoding: 8-bit binary PGM (P5), maxval 255
pixel = round(255 * min(abs_rel, {scale}) / {scale})
pixels outside the evaluation mask: 0
"""

OVERRIDE_KEYS = ("tau", "min_coverage", "bins", "percentile", "seed", "preset", "scale",
                 "p", "iterations", "gray_world", "jobs")
DEFAULTS = {"tau": 0.5, "min_coverage": 0.3, "bins": 10, "percentile": 1.0, "seed": 42,
            "preset": None, "scale": 1.0, "p": 0.01, "iterations": 50, "gray_world": 2.0, "jobs": 1}
_CASTS = {"bins": int, "seed": int, "iterations": int, "jobs": int, "preset": str}

VALIDATION_ERRORS = (FormatError, kvconfig.ConfigError, ManifestError, FileNotFoundError,
                     IsADirectoryError, PermissionError, ValueError, TypeError)
NUMERIC_ERRORS = (NumericFailure, DegenerateFitError, InsufficientRangeDiversity, EmptyEstimateError,
                  EmptyMaskError, AllSamplesRejected, FloatingPointError)


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one subcommand: defaults < --config file < flags."""

    command: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args: argparse.Namespace, inputs: dict, outputs: dict) -> "RunConfig":
        params = dict(DEFAULTS)
        if getattr(args, "config", None):
            file_cfg = kvconfig.read(args.config)
            kvconfig.check_keys(file_cfg, OVERRIDE_KEYS)
            for k, v in file_cfg.items():
                try:
                    params[k] = _CASTS.get(k, float)(v)
                except ValueError:
                    raise kvconfig.ConfigError(f"override {k!r}: bad value {v!r}") from None
        for k in OVERRIDE_KEYS:
            v = getattr(args, k, None)
            if v is not None:
                params[k] = v
        cfg = cls(args.command, {k: v for k, v in inputs.items() if v is not None},
                  {k: v for k, v in outputs.items() if v is not None}, params)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name, p in self.inputs.items():
            paths = p if isinstance(p, list) else [p]
            for q in paths:
                if not Path(q).exists():
                    raise FileNotFoundError(f"--{name.replace('_', '-')}: no such file or directory: {q}")
        for name, p in self.outputs.items():
            parent = Path(p).parent
            if not parent.exists():
                raise FileNotFoundError(f"--{name.replace('_', '-')}: parent directory does not exist: {parent}")
        pr = self.params
        if not 0.0 <= pr["tau"] <= 1.0:
            raise UsageError(f"tau must lie in [0, 1], got {pr['tau']}")
        if not 0.0 <= pr["min_coverage"] <= 1.0:
            raise UsageError(f"min_coverage must lie in [0, 1], got {pr['min_coverage']}")
        if pr["bins"] < 3:
            raise UsageError(f"bins must be >= 3, got {pr['bins']}")
        if not 0.0 < pr["percentile"] <= 100.0:
            raise UsageError(f"percentile must lie in (0, 100], got {pr['percentile']}")
        if pr["jobs"] < 1:
            raise UsageError(f"jobs must be >= 1, got {pr['jobs']}")
        if not pr["scale"] > 0:
            raise UsageError(f"scale must be > 0, got {pr['scale']}")
        if pr["preset"] is not None and pr["preset"] not in PRESETS:
            raise UsageError(f"unknown preset {pr['preset']!r}")


def _ordered_map(fn, items, jobs: int) -> list:
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _chain_kw(params: dict) -> dict:
    return {
        "n_bins": params["bins"],
        "dark_fraction": params["percentile"] / 100.0,
        "p": params["p"],
        "n_iter": params["iterations"],
        "gray_world": params["gray_world"],
        "n_jobs": params["jobs"],
    }


# ---------------------------------------------------------------------------
# subcommands

def cmd_synthesize(args) -> int:
    cfg = RunConfig.from_args(args, {"clean": args.clean, "range": args.range, "params": args.params},
                              {"out": args.out})
    if args.params is None and cfg.params["preset"] is None:
        raise UsageError("give --params or --preset")
    params = WaterParams.load(args.params) if args.params else WaterParams.preset(cfg.params["preset"])
    clean = raster_io.load(args.clean, "rgb")
    rng = raster_io.load(args.range, "range")
    out, report = synthesize(clean, rng, params)
    raster_io.save(args.out, raster_io.write_ppm(out, args.maxval))
    log.info("synthesized %s: %d clamped, %d invalid-range pixels", args.out,
             report.clamped_pixels, report.invalid_pixels)
    return 0


def cmd_enhance(args) -> int:
    cfg = RunConfig.from_args(
        args, {"in": getattr(args, "in"), "ulap_coeffs": args.ulap_coeffs, "range": args.range},
        {"out": args.out},
    )
    if (args.ulap_coeffs is None) == (args.range is None):
        raise UsageError("give exactly one of --ulap-coeffs or --range")
    img = raster_io.load(getattr(args, "in"), "rgb")
    kw = _chain_kw(cfg.params)
    if args.range:
        rng = raster_io.load(args.range, "range")
        out, report = restore_from_range(img, rng, **kw)
    else:
        coeffs = UlapCoefficients.load(args.ulap_coeffs)
        out, report = enhance(img, coeffs, cfg.params["scale"], **kw)
    raster_io.save(args.out, raster_io.write_ppm(out, args.maxval))
    if report.passthrough:
        log.info("predicted range is flat; image passed through unchanged")
    if args.dump_intermediates:
        d = Path(args.dump_intermediates)
        d.mkdir(parents=True, exist_ok=True)
        raster_io.save(d / "range.pfm", raster_io.write_pfm(report.range_map))
        if not report.passthrough:
            kvconfig.write(d / "backscatter.cfg", report.backscatter.to_config())
            kvconfig.write(d / "attenuation.cfg", report.attenuation.to_config())
            for i, ch in enumerate("rgb"):
                raster_io.save(d / f"illuminant_{ch}.pfm", raster_io.write_pfm(report.illuminant.data[:, :, i]))
    return 0


def _load_mask(m: SceneManifest, rec, tau: float, shape) -> DepthMask:
    if rec.mask:
        mask = raster_io.load(m.resolve(rec.mask), "mask")
    elif rec.confidence:
        mask = confidence_to_mask(raster_io.load(m.resolve(rec.confidence), "confidence"), tau)
    else:
        mask = DepthMask(np.ones(shape, dtype=bool))
    if mask.shape != tuple(shape):
        raise ValueError(f"sample {rec.id!r}: mask shape {mask.shape} does not match {tuple(shape)}")
    return mask


def cmd_fit_ulap(args) -> int:
    cfg = RunConfig.from_args(args, {"manifest": args.manifest}, {"out": args.out})
    manifests = [SceneManifest.load(p) for p in args.manifest]
    tau = cfg.params["tau"]

    def load_scene(m):
        pairs, masks = [], []
        for rec in m.samples:
            if rec.depth is None:
                raise ManifestError(f"sample {rec.id!r} has no depth path")
            img = raster_io.load(m.resolve(rec.rgb), "rgb")
            z = raster_io.load(m.resolve(rec.depth), "range")
            pairs.append((img, z))
            masks.append(_load_mask(m, rec, tau, z.shape))
        return pairs, masks

    scenes = _ordered_map(load_scene, manifests, cfg.params["jobs"])
    if args.scope == "global":
        pairs = [p for s in scenes for p in s[0]]
        masks = [k for s in scenes for k in s[1]]
        coeffs, report = fit_ulap(pairs, masks)
        kvconfig.write(args.out, coeffs.to_config(),
                       header=f"scope=global pixels={report.n_pixels} rmse={report.rmse!r}")
        return 0
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    for m, (pairs, masks) in zip(manifests, scenes):
        coeffs, report = fit_ulap(pairs, masks)
        kvconfig.write(out / f"{m.scene_id}.cfg", coeffs.to_config(),
                       header=f"scene={m.scene_id} pixels={report.n_pixels} rmse={report.rmse!r}")
    return 0


def cmd_build_masks(args) -> int:
    cfg = RunConfig.from_args(args, {"manifest": args.manifest},
                              {"out_manifest": args.out_manifest, "drop_log": args.drop_log})
    m = SceneManifest.load(args.manifest)
    out_manifest = Path(args.out_manifest)
    mask_dir = Path(args.mask_dir) if args.mask_dir else out_manifest.parent / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    tau = cfg.params["tau"]

    def rebase(path):
        # sample paths in the written manifest are relative to its own directory
        return os.path.relpath(Path(path).resolve(), out_manifest.parent.resolve())

    def build(rec):
        if rec.confidence is None:
            raise ManifestError(f"sample {rec.id!r} has no confidence path")
        mask = confidence_to_mask(raster_io.load(m.resolve(rec.confidence), "confidence"), tau)
        path = mask_dir / f"{rec.id}.pgm"
        raster_io.save(path, raster_io.write_mask(mask))
        return replace(rec, mask=rebase(path), coverage=mask.coverage,
                       **{k: rebase(m.resolve(getattr(rec, k))) for k in ("rgb", "enhanced", "depth", "confidence")
                          if getattr(rec, k) is not None})

    records = _ordered_map(build, m.samples, cfg.params["jobs"])
    updated = SceneManifest(m.scene_id, records, out_manifest.parent)
    kept, drops = filter_scene(updated, cfg.params["min_coverage"])
    kept.save(out_manifest)
    lines = [json.dumps({"scene_id": d.scene_id, "sample_id": d.sample_id, "coverage": d.coverage,
                         "reason": d.reason}) for d in drops]
    log_path = Path(args.drop_log) if args.drop_log else out_manifest.with_suffix(".drops.jsonl")
    log_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    log.info("kept %d of %d samples", len(kept), len(m))
    return 0


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    mse = float(np.mean((ref - test) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def cmd_evaluate(args) -> int:
    cfg = RunConfig.from_args(
        args,
        {"manifest": args.manifest, "pred_dir": args.pred_dir,
         "psnr": list(args.psnr) if args.psnr else None},
        {},
    )
    if not args.manifest and not args.psnr:
        raise UsageError("give --manifest (depth metrics) and/or --psnr REF TEST")
    if args.psnr:
        ref = raster_io.load(args.psnr[0], "rgb")
        test = raster_io.load(args.psnr[1], "rgb")
        if ref.shape != test.shape:
            raise ValueError(f"PSNR images differ in size: {ref.shape} vs {test.shape}")
        print(f"psnr_db={psnr(ref.data, test.data):.4f}")
    if not args.manifest:
        return 0
    if args.pred_dir is None or args.out_dir is None or args.n is None:
        raise UsageError("depth evaluation needs --pred-dir, --out-dir and --n")
    manifests = [SceneManifest.load(p) for p in args.manifest]
    refs = sample_eval_set(manifests, args.n, cfg.params["seed"])
    by_scene = {m.scene_id: m for m in manifests}
    tau = cfg.params["tau"]
    pred_dir = Path(args.pred_dir)

    def evaluate_one(ref):
        m = by_scene[ref.scene_id]
        rec = ref.record
        if rec.depth is None:
            raise ManifestError(f"sample {rec.id!r} has no depth path")
        gt = raster_io.load(m.resolve(rec.depth), "range")
        pred = raster_io.load(pred_dir / ref.scene_id / f"{rec.id}.pfm", "range")
        if pred.shape != gt.shape:
            raise ValueError(f"sample {rec.id!r}: prediction {pred.shape} vs ground truth {gt.shape}")
        mask = DepthMask(_load_mask(m, rec, tau, gt.shape).data & gt.valid & (gt.data > 0) & pred.valid)
        return compute_metrics(pred, gt, mask), abs_rel_error_map(pred, gt, mask)

    results = _ordered_map(evaluate_one, refs, cfg.params["jobs"])
    out_dir = Path(args.out_dir)
    heat_dir = out_dir / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ref, (rep, err) in zip(refs, results):
        name = f"{ref.scene_id}/{ref.record.id}"
        rows.append((name, rep))
        heat = np.minimum(err, HEATMAP_SCALE) / HEATMAP_SCALE
        raster_io.save(heat_dir / f"{ref.scene_id}__{ref.record.id}.pgm", raster_io.write_pgm(heat))
    (heat_dir / "SCALE.txt").write_text(HEATMAP_NOTE.format(scale=HEATMAP_SCALE), encoding="utf-8")
    (out_dir / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")
    return 0


def cmd_fusion_check(args) -> int:
    cfg = RunConfig.from_args(args, {}, {})
    seed = cfg.params["seed"]
    if min(args.channels, args.height, args.width, args.probes) < 1:
        raise UsageError("channels, height, width and probes must be >= 1")
    worst = {}
    for op in ("spatial_attention", "channel_attention", "fuse"):
        worst[op] = max(
            gradient_check(op, Probe.random(args.channels, args.height, args.width, seed=seed + i))
            for i in range(args.probes)
        )
    bound_ok = True
    shape_ok = True
    for i in range(args.probes):
        pr = Probe.random(args.channels, args.height, args.width, seed=seed + 1000 + i)
        out = fuse(pr.texture, pr.depth, pr.weights)
        shape_ok &= out.shape == pr.texture.shape
        lo = np.minimum(pr.texture, pr.depth)
        hi = np.maximum(pr.texture, pr.depth)
        slack = 4 * np.finfo(float).eps * np.maximum(np.abs(lo), np.abs(hi))  # rounding of d + q (t - d)
        bound_ok &= bool(np.all((out >= lo - slack) & (out <= hi + slack)))
    for op, err in worst.items():
        print(f"max_rel_grad_error[{op}]={err:.3e}")
    print(f"convex_bound={'pass' if bound_ok else 'FAIL'}")
    print(f"shape={'pass' if shape_ok else 'FAIL'}")
    overall = max(worst.values())
    print(f"max_rel_grad_error={overall:.3e}")
    return 0 if (overall < 1e-4 and bound_ok and shape_ok) else 1


# ---------------------------------------------------------------------------
# parser

def _add_overrides(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="key=value file of parameter overrides")
    helps = {
        "tau": ("float", "confidence threshold for masks (default 0.5)"),
        "min_coverage": ("float", "drop samples whose mask covers less than this (default 0.3)"),
        "bins": ("int", "number of range bins (default 10)"),
        "percentile": ("float", "darkest percentage per bin for backscatter (default 1.0)"),
        "seed": ("int", "random seed (default 42)"),
        "preset": ("str", f"water preset: {', '.join(PRESETS)}"),
        "scale": ("float", "meters per ULAP unit (default 1.0)"),
        "p": ("float", "illuminant update weight (default 0.01)"),
        "iterations": ("int", "illuminant iterations (default 50)"),
        "gray_world": ("float", "gray-world factor (default 2.0)"),
        "jobs": ("int", "parallel workers; output is independent of this (default 1)"),
    }
    casts = {"float": float, "int": int, "str": str}
    for n in names:
        kind, text = helps[n]
        p.add_argument(f"--{n.replace('_', '-')}", dest=n, type=casts[kind], default=None, help=text)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aquathru", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize", help="degrade a clean image with the formation model")
    p.add_argument("--clean", required=True, help="clean image, binary PPM")
    p.add_argument("--range", required=True, help="range map, PFM (meters)")
    p.add_argument("--params", help="water parameter config (key=value)")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--maxval", type=int, choices=(255, 65535), default=65535)
    _add_overrides(p, "preset")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("enhance", help="restore an underwater image")
    p.add_argument("--in", required=True, help="underwater image, binary PPM")
    p.add_argument("--ulap-coeffs", help="ULAP coefficient config; range is predicted from the image")
    p.add_argument("--range", help="measured range map (PFM) to use instead of the ULAP prediction")
    p.add_argument("--out", required=True, help="restored PPM")
    p.add_argument("--maxval", type=int, choices=(255, 65535), default=65535)
    p.add_argument("--dump-intermediates", metavar="DIR",
                   help="write range, backscatter config, illuminant PFMs and attenuation config here")
    _add_overrides(p, "scale", "bins", "percentile", "p", "iterations", "gray_world", "jobs")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("fit-ulap", help="fit ULAP coefficients over manifests")
    p.add_argument("--manifest", required=True, action="append", help="scene manifest JSON (repeatable)")
    p.add_argument("--scope", choices=("scene", "global"), default="scene",
                   help="one fit per scene (writes OUT/<scene>.cfg) or one global fit (writes OUT)")
    p.add_argument("--out", required=True, help="output directory (scene) or config file (global)")
    _add_overrides(p, "tau", "jobs")
    p.set_defaults(func=cmd_fit_ulap)

    p = sub.add_parser("build-masks", help="threshold confidence maps and filter a manifest")
    p.add_argument("--manifest", required=True, help="scene manifest JSON")
    p.add_argument("--out-manifest", required=True, help="filtered manifest to write")
    p.add_argument("--mask-dir", help="where mask PGMs go (default: <out-manifest dir>/masks)")
    p.add_argument("--drop-log", help="JSON-lines drop log (default: <out-manifest>.drops.jsonl)")
    _add_overrides(p, "tau", "min_coverage", "jobs")
    p.set_defaults(func=cmd_build_masks)

    p = sub.add_parser("evaluate", help="depth metrics over a sampled evaluation set, and PSNR")
    p.add_argument("--manifest", action="append", help="scene manifest JSON (repeatable)")
    p.add_argument("--pred-dir", help="predictions as <pred-dir>/<scene_id>/<sample_id>.pfm")
    p.add_argument("--n", type=int, help="number of evaluation samples")
    p.add_argument("--out-dir", help="writes metrics.csv and heatmaps/ here")
    p.add_argument("--psnr", nargs=2, metavar=("REF", "TEST"), help="print PSNR between two PPMs")
    _add_overrides(p, "tau", "seed", "jobs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fusion-check", help="shape, range and gradient checks of the fusion block")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--probes", type=int, default=5)
    _add_overrides(p, "seed")
    p.set_defaults(func=cmd_fusion_check)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("AQUATHRU_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(e, 2)
    try:
        return args.func(args)
    except NUMERIC_ERRORS as e:
        return _fail(e, 1)
    except VALIDATION_ERRORS as e:
        return _fail(e, 2)
    except OSError as e:
        return _fail(e, 2)


if __name__ == "__main__":
    sys.exit(main())
