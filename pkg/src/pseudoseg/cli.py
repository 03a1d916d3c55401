"""Command line entry point.

Exit codes: 0 success, 1 validation or contract error, 2 adapter failure.
Logs go to stderr as one JSON object per line; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .dataset import (
    Dataset,
    GeometricTransform,
    ImageRecord,
    load_dataset,
    transform_annotation,
    with_provenance,
    write_dataset,
)
from .errors import PseudoSegError, ValidationError
from .imaging import (
    CHAINS,
    ImageBuffer,
    decode_png,
    draw_jitter_factors,
    encode_png,
    enhance,
    hflip,
    hsv_adjust,
    image_rng,
    scale,
    translate,
    vflip,
)
from .jsonio import canonical_dumps
from .metrics import evaluate
from .modelmath import Checkpoint, GainCoefficients, LossComponents, average_checkpoints, composite_loss
from .pseudolabel import (
    filter_predictions,
    merge_datasets,
    predictions_to_dataset,
    read_manifest,
    run_inference_adapter,
)

log = logging.getLogger("pseudoseg")

_RESERVED = set(vars(logging.makeLogRecord({})))


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        for k, v in vars(record).items():
            if k not in _RESERVED and k not in out and not k.startswith("_"):
                out[k] = v
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out, default=str, sort_keys=True)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("pseudoseg")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


def _stamp(cfg: PipelineConfig, command: str, **extra) -> dict:
    prov = {"tool": "pseudoseg", "version": __version__, "command": command,
            "config_digest": cfg.digest(), "seed": cfg.seed}
    prov.update(extra)
    return prov


def _write_bytes(path: str, data: bytes, dry_run: bool) -> None:
    if dry_run:
        log.info("dry run: would write", extra={"path": path, "bytes": len(data)})
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise ValidationError(f"no {what} given (flag or config)")
    if not os.path.exists(path):
        raise ValidationError(f"{what} does not exist: {path}")
    return path


def _png_files(directory: str) -> list[str]:
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(".png") and os.path.isfile(os.path.join(directory, f)))


# -- enhance -------------------------------------------------------------------


def _enhance_one(name: str, in_dir: str, cfg: PipelineConfig):
    with open(os.path.join(in_dir, name), "rb") as f:
        raw = f.read()
    if cfg.chain == "none":
        return name, raw, raw
    try:
        img = decode_png(raw)
    except Exception as e:  # Pillow raises a zoo of exception types on bad input
        raise ValidationError(f"{name}: cannot decode image: {e}") from e
    return name, raw, encode_png(enhance(img, cfg.chain, cfg.enhance))


def enhance_directory(cfg: PipelineConfig, in_dir: str, out_dir: str, jobs: int = 1, dry_run: bool = False) -> int:
    names = _png_files(in_dir)
    errors = []
    files = []

    def work(name):
        try:
            return _enhance_one(name, in_dir, cfg)
        except (PseudoSegError, OSError) as e:
            return name, e, None

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(work, names))
    for name, raw, out in sorted(results, key=lambda r: r[0]):
        if out is None:
            log.error("image failed", extra={"file": name, "error": str(raw)})
            errors.append({"file": name, "error": str(raw)})
            continue
        _write_bytes(os.path.join(out_dir, name), out, dry_run)
        files.append({"file": name, "input_sha256": _sha256(raw), "output_sha256": _sha256(out)})
    params = asdict(cfg.enhance)
    params["clahe_tiles"] = list(cfg.enhance.clahe_tiles)
    prov = _stamp(cfg, "enhance", chain=cfg.chain, params=params, files=files, errors=errors,
                  generated_at=_timestamp())
    _write_bytes(os.path.join(out_dir, "provenance.json"), canonical_dumps(prov).encode("utf-8"), dry_run)
    log.info("enhance done", extra={"processed": len(files), "failed": len(errors)})
    return 1 if errors else 0


def cmd_enhance(args, cfg: PipelineConfig) -> int:
    in_dir = _require(args.in_dir or cfg.paths.unlabeled_images, "input directory")
    out_dir = args.out_dir or (cfg.paths.output_dir and os.path.join(cfg.paths.output_dir, "enhanced"))
    if not out_dir:
        raise ValidationError("no output directory given (--out-dir or paths.output_dir)")
    return enhance_directory(cfg, in_dir, out_dir, args.jobs, args.dry_run)


# -- augment -------------------------------------------------------------------


def augment_image(img: ImageBuffer, anns, record: ImageRecord, cfg: PipelineConfig):
    """Apply the seeded random augmentation for one image to pixels and annotations."""
    rng = image_rng(cfg.seed, record.id)
    # fixed draw order so enabling or disabling one transform never shifts the others
    do_h = rng.random() < 0.5
    do_v = rng.random() < 0.5
    s = 1.0 + rng.uniform(-1.0, 1.0) * cfg.augment.scale
    tx = int(np.rint(rng.uniform(-1.0, 1.0) * cfg.augment.translate * record.width))
    ty = int(np.rint(rng.uniform(-1.0, 1.0) * cfg.augment.translate * record.height))
    dh, ds, dv = draw_jitter_factors(cfg.jitter, rng)

    steps = []
    if cfg.augment.hflip and do_h:
        steps.append((GeometricTransform("hflip"), hflip))
    if cfg.augment.vflip and do_v:
        steps.append((GeometricTransform("vflip"), vflip))
    if cfg.augment.scale > 0 and s != 1.0:
        steps.append((GeometricTransform.scale(s), lambda im: scale(im, s)))
    if tx or ty:
        steps.append((GeometricTransform.translate(tx, ty), lambda im: translate(im, tx, ty)))
    applied = []
    for t, fn in steps:
        img = fn(img)
        anns = [b for b in (transform_annotation(a, t, record) for a in anns) if b is not None]
        applied.append({"kind": t.kind, "dx": t.dx, "dy": t.dy, "factor": t.factor})
    if cfg.augment.hsv:
        if img.channels == 3:
            img = hsv_adjust(img, dh, ds, dv)
        else:
            # grayscale has zero saturation, so only the value factor applies
            img = ImageBuffer(np.clip(np.floor(img.pixels * dv + 0.5), 0, 255).astype(np.uint8))
        applied.append({"kind": "hsv", "hue_shift": dh, "sat_factor": ds, "val_factor": dv})
    return img, anns, applied


def cmd_augment(args, cfg: PipelineConfig) -> int:
    ds_path = _require(args.dataset or cfg.paths.labeled, "dataset")
    d = load_dataset(ds_path)
    img_dir = _require(args.images_dir, "images directory")
    out_dir = args.out_dir
    if not out_dir:
        raise ValidationError("no output directory given (--out-dir)")
    by_img = d.annotations_by_image()

    def work(rec):
        with open(os.path.join(img_dir, rec.file_name), "rb") as f:
            img = decode_png(f.read())
        if (img.width, img.height) != (rec.width, rec.height):
            raise ValidationError(f"{rec.file_name}: size {img.width}x{img.height} disagrees with dataset")
        return rec, *augment_image(img, by_img[rec.id], rec, cfg)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(work, d.images))
    anns = []
    transforms = {}
    for rec, img, new_anns, applied in results:
        _write_bytes(os.path.join(out_dir, rec.file_name), encode_png(img), args.dry_run)
        anns.extend(new_anns)
        transforms[str(rec.id)] = applied
    out = Dataset(d.images, tuple(anns), d.categories, dict(d.provenance))
    out = with_provenance(out, augment=_stamp(cfg, "augment", dropped=len(d.annotations) - len(anns),
                                               transforms=transforms))
    _write_bytes(os.path.join(out_dir, "dataset.json"), write_dataset(out).encode("utf-8"), args.dry_run)
    return 0


# -- pseudo-label ------------------------------------------------------------------


def pseudo_label(cfg: PipelineConfig, labeled: Dataset, manifest: list[ImageRecord], image_root: Optional[str],
                 jobs: int = 1, work_dir: Optional[str] = None) -> Dataset:
    if cfg.adapter is None:
        raise ValidationError("config has no adapter section")
    root = image_root
    if cfg.enhance_before_inference and cfg.chain != "none":
        if image_root is None or work_dir is None:
            raise ValidationError("pre-inference enhancement needs an image directory and a work directory")
        root = os.path.join(work_dir, "pre_inference")
        names = {rec.file_name for rec in manifest}
        status = enhance_directory(cfg, image_root, root, jobs)
        missing = [n for n in names if not os.path.exists(os.path.join(root, n))]
        if status or missing:
            raise ValidationError(f"pre-inference enhancement failed for {sorted(missing) or 'some images'}")
    preds = run_inference_adapter(cfg.adapter, manifest, root)
    kept = filter_predictions(preds, cfg.threshold)
    log.info("predictions filtered", extra={"received": len(preds), "kept": len(kept), "tau": cfg.threshold.tau})
    prov = _stamp(cfg, "pseudo-label", tau=cfg.threshold.tau, predictions_received=len(preds),
                  predictions_kept=len(kept), enhance_before_inference=cfg.enhance_before_inference)
    return predictions_to_dataset(kept, manifest, labeled.categories, prov)


def cmd_pseudo_label(args, cfg: PipelineConfig) -> int:
    labeled = load_dataset(_require(args.labeled or cfg.paths.labeled, "labeled dataset"))
    manifest = read_manifest(_require(args.manifest or cfg.paths.unlabeled_manifest, "unlabeled manifest"))
    image_root = args.images_dir or cfg.paths.unlabeled_images
    if image_root:
        _require(image_root, "unlabeled image directory")
    out = args.out or (cfg.paths.output_dir and os.path.join(cfg.paths.output_dir, "pseudo.json"))
    if not out:
        raise ValidationError("no output path given (--out or paths.output_dir)")
    if args.dry_run:
        if cfg.adapter is None:
            raise ValidationError("config has no adapter section")
        log.info("dry run: would run adapter", extra={"mode": cfg.adapter.mode, "images": len(manifest), "out": out})
        return 0
    with tempfile.TemporaryDirectory(prefix="pseudoseg-") as work:
        d = pseudo_label(cfg, labeled, manifest, image_root, args.jobs, work)
    _write_bytes(out, write_dataset(d).encode("utf-8"), False)
    print(f"images={len(d.images)}")
    print(f"annotations={len(d.annotations)}")
    return 0


# -- merge / evaluate / weights / loss -------------------------------------------------


def cmd_merge(args, cfg: PipelineConfig) -> int:
    a = load_dataset(_require(args.labeled, "labeled dataset"))
    b = load_dataset(_require(args.pseudo, "pseudo dataset"))
    merged = merge_datasets(a, b, _stamp(cfg, "merge"))
    _write_bytes(args.out, write_dataset(merged).encode("utf-8"), args.dry_run)
    print(f"images={len(merged.images)}")
    print(f"annotations={len(merged.annotations)}")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    pred = load_dataset(_require(args.pred, "prediction dataset"))
    gt = load_dataset(_require(args.gt, "ground-truth dataset"))
    report = evaluate(pred, gt, cfg.iou_threshold)
    if args.out:
        _write_bytes(args.out, report.to_json(_stamp(cfg, "evaluate")).encode("utf-8"), args.dry_run)
    if args.csv:
        _write_bytes(args.csv, report.to_csv().encode("utf-8"), args.dry_run)
    print(f"micro_f1={report.micro_f1:.6f}")
    print(f"macro_f1={report.macro_f1:.6f}")
    print(f"map50={report.map50:.6f}")
    return 0


def cmd_avg_weights(args, cfg: PipelineConfig) -> int:
    ckpts = []
    for p in args.paths:
        with open(_require(p, "checkpoint"), "rb") as f:
            try:
                ckpts.append(Checkpoint.from_json(f.read()))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValidationError(f"{p}: malformed checkpoint: {e}") from e
    avg = average_checkpoints(ckpts)
    avg.provenance = _stamp(cfg, "avg-weights", inputs=len(ckpts))
    _write_bytes(args.out, avg.to_json().encode("utf-8"), args.dry_run)
    print(f"tensors={len(avg.tensors)}")
    return 0


def cmd_loss(args, cfg: PipelineConfig) -> int:
    comps = LossComponents(*args.components)
    gains = GainCoefficients(*args.gains) if args.gains else GainCoefficients()
    print(f"loss={composite_loss(comps, gains)!r}")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("--dry-run", action="store_true", help="do everything except writing files")
    common.add_argument("--log-level", default="info")

    p = argparse.ArgumentParser(prog="pseudoseg", description="Cross-task pseudo-label curation toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("enhance", parents=[common], help="run an enhancement chain over a PNG directory")
    s.add_argument("--in-dir")
    s.add_argument("--out-dir")
    s.add_argument("--chain", choices=CHAINS)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("augment", parents=[common], help="seeded geometric + HSV augmentation of a dataset")
    s.add_argument("--dataset")
    s.add_argument("--images-dir")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("pseudo-label", parents=[common], help="pseudo-label an unlabeled image set")
    s.add_argument("--labeled", help="labeled dataset (source of the category table)")
    s.add_argument("--manifest", help="unlabeled image manifest")
    s.add_argument("--images-dir", help="unlabeled image directory")
    s.add_argument("--out")
    s.add_argument("--tau", type=float)
    s.add_argument("--chain", choices=CHAINS)
    s.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("merge", parents=[common], help="union of labeled and pseudo-labeled datasets")
    s.add_argument("labeled")
    s.add_argument("pseudo")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("evaluate", parents=[common], help="F1 and mAP@50 of predictions against ground truth")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.add_argument("--iou-threshold", type=float)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("avg-weights", parents=[common], help="element-wise mean of checkpoints")
    s.add_argument("paths", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_avg_weights)

    s = sub.add_parser("loss", parents=[common], help="weighted sum of the four loss components")
    s.add_argument("--components", type=float, nargs=4, required=True, metavar=("L_C", "L_F", "L_S", "L_B"))
    s.add_argument("--gains", type=float, nargs=4, metavar=("LAMBDA_B", "LAMBDA_C", "LAMBDA_S", "LAMBDA_F"))
    s.set_defaults(func=cmd_loss)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(
            seed=args.seed,
            tau=getattr(args, "tau", None),
            chain=getattr(args, "chain", None),
            iou_threshold=getattr(args, "iou_threshold", None),
        )
        return args.func(args, cfg)
    except PseudoSegError as e:
        extra = {"error": type(e).__name__}
        if getattr(e, "diagnostics", None):
            extra["diagnostics"] = e.diagnostics
        log.error(str(e), extra=extra)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        log.error(str(e), extra={"error": type(e).__name__})
        return 1


if __name__ == "__main__":
    sys.exit(main())
