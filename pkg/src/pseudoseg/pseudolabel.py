"""Cross-task pseudo-labelling: run an external model over unlabeled images,
keep confident predictions, turn them into annotations and merge the result
with the labeled dataset.

The model is reached only through a file protocol. An adapter either points
at an existing predictions file, or is a command invoked as
``<command> <manifest_path> <output_path>`` that reads the image manifest
(a JSON list of ``{id, file_name, width, height}``) and writes predictions as
JSON Lines with keys ``image_id``, ``category_id``, ``segmentation`` and
``score``.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .dataset import (
    LABELED,
    PSEUDO,
    Annotation,
    Category,
    Dataset,
    ImageRecord,
    dataset_digest,
    make_annotation,
)
from .errors import AdapterError, ContractError, ParseError, ReferentialError, ValidationError
from .geometry import check_polygon

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class PredictionRecord:
    image_id: int
    category_id: int
    segmentation: tuple[tuple[float, ...], ...]
    score: float


@dataclass(frozen=True)
class AdapterSpec:
    mode: str = "file"
    path: Optional[str] = None
    command: tuple[str, ...] = ()
    timeout: float = 600.0

    def __post_init__(self):
        if self.mode not in ("file", "exec"):
            raise ValidationError(f"adapter mode must be 'file' or 'exec', got {self.mode!r}")
        if not self.timeout > 0:
            raise ValidationError(f"adapter timeout must be positive, got {self.timeout}")
        if isinstance(self.command, str):
            object.__setattr__(self, "command", tuple(shlex.split(self.command)))
        else:
            object.__setattr__(self, "command", tuple(self.command))
        if self.mode == "file" and not self.path:
            raise ValidationError("file adapter needs a predictions path")
        if self.mode == "exec" and not self.command:
            raise ValidationError("exec adapter needs a command")


@dataclass(frozen=True)
class ThresholdPolicy:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"threshold tau must lie in [0, 1], got {self.tau}")


def write_manifest(images: Iterable[ImageRecord], path, image_root=None) -> None:
    entries = []
    for im in sorted(images, key=lambda r: r.id):
        fname = im.file_name if image_root is None else os.path.join(os.fspath(image_root), im.file_name)
        entries.append({"id": im.id, "file_name": fname, "width": im.width, "height": im.height})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=1)
        f.write("\n")


def read_manifest(path) -> list[ImageRecord]:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        entries = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed manifest JSON: {e.msg}", len(raw.decode("utf-8")[: e.pos].encode())) from e
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: manifest must be a JSON list")
    out = []
    for e in entries:
        try:
            out.append(ImageRecord(int(e["id"]), str(e["file_name"]), int(e["width"]), int(e["height"])))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: bad manifest entry {e!r}") from exc
    return out


def parse_predictions(text: str, images: dict[int, ImageRecord]) -> list[PredictionRecord]:
    """Parse and validate a JSON Lines predictions document."""
    preds = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        start = offset
        offset += len(line.encode("utf-8"))
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"predictions line {lineno}: {e.msg}", start + len(line[: e.pos].encode("utf-8"))) from e
        if not isinstance(obj, dict):
            raise ValidationError(f"predictions line {lineno}: expected an object")
        missing = {"image_id", "category_id", "segmentation", "score"} - obj.keys()
        if missing:
            raise ValidationError(f"predictions line {lineno}: missing keys {sorted(missing)}")
        image = images.get(obj["image_id"])
        if image is None:
            raise ReferentialError(f"predictions line {lineno}: image_id {obj['image_id']!r} does not resolve")
        score = obj["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ValidationError(f"predictions line {lineno}: score {score!r} outside [0, 1]")
        seg = obj["segmentation"]
        if not isinstance(seg, list) or not seg:
            raise ValidationError(f"predictions line {lineno}: segmentation must be a non-empty list of polygons")
        polys = []
        for poly in seg:
            if not isinstance(poly, list):
                raise ValidationError(f"predictions line {lineno}: polygons must be flat coordinate lists")
            check_polygon(poly, f"predictions line {lineno}")
            xs, ys = poly[0::2], poly[1::2]
            if min(xs) < 0 or min(ys) < 0 or max(xs) > image.width or max(ys) > image.height:
                raise ValidationError(f"predictions line {lineno}: polygon leaves image {image.id} bounds")
            polys.append(tuple(float(v) for v in poly))
        cat = obj["category_id"]
        if isinstance(cat, bool) or not isinstance(cat, int):
            raise ValidationError(f"predictions line {lineno}: category_id must be an integer")
        preds.append(PredictionRecord(image.id, cat, tuple(polys), float(score)))
    return preds


def write_predictions(preds: Iterable[PredictionRecord]) -> str:
    lines = []
    for p in preds:
        lines.append(
            json.dumps(
                {
                    "image_id": p.image_id,
                    "category_id": p.category_id,
                    "segmentation": [list(poly) for poly in p.segmentation],
                    "score": p.score,
                },
                separators=(",", ":"),
            )
        )
    return "".join(line + "\n" for line in lines)


def _tail(b: bytes | str | None, limit: int = 4000) -> str:
    if not b:
        return ""
    s = b.decode("utf-8", "replace") if isinstance(b, bytes) else b
    return s[-limit:]


def run_inference_adapter(
    spec: AdapterSpec,
    images: Dataset | Sequence[ImageRecord],
    image_root=None,
) -> list[PredictionRecord]:
    """Obtain model predictions for ``images`` through the adapter.

    ``image_root``, when given, is joined onto each ``file_name`` in the
    manifest handed to an exec adapter.
    """
    records = list(images.images if isinstance(images, Dataset) else images)
    index = {im.id: im for im in records}

    if spec.mode == "file":
        try:
            with open(spec.path, "rb") as f:
                text = f.read().decode("utf-8")
        except OSError as e:
            raise AdapterError(f"cannot read predictions file {spec.path}: {e}") from e
        return parse_predictions(text, index)

    with tempfile.TemporaryDirectory(prefix="pseudoseg-") as tmp:
        manifest = os.path.join(tmp, "manifest.json")
        output = os.path.join(tmp, "predictions.jsonl")
        write_manifest(records, manifest, image_root)
        cmd = [*spec.command, manifest, output]
        log.info("running adapter", extra={"command": cmd, "images": len(records)})
        try:
            proc = subprocess.run(cmd, capture_output=True, timeout=spec.timeout)
        except subprocess.TimeoutExpired as e:
            raise AdapterError(
                f"adapter timed out after {spec.timeout} s", _tail(e.stderr) or _tail(e.stdout)
            ) from e
        except OSError as e:
            raise AdapterError(f"cannot start adapter {cmd[0]!r}: {e}") from e
        if proc.returncode != 0:
            raise AdapterError(
                f"adapter exited with status {proc.returncode}", _tail(proc.stderr) or _tail(proc.stdout)
            )
        if not os.path.exists(output):
            raise AdapterError("adapter exited cleanly but wrote no predictions file", _tail(proc.stderr))
        with open(output, "rb") as f:
            return parse_predictions(f.read().decode("utf-8"), index)


def filter_predictions(preds: Iterable[PredictionRecord], policy: ThresholdPolicy = ThresholdPolicy()) -> list[PredictionRecord]:
    """Keep predictions scoring at least ``policy.tau``, in their original order."""
    return [p for p in preds if p.score >= policy.tau]


def predictions_to_dataset(
    preds: Sequence[PredictionRecord],
    images: Iterable[ImageRecord],
    categories: Iterable[Category],
    provenance: Optional[dict] = None,
) -> Dataset:
    """Build the pseudo-labeled dataset.

    Annotation ids run 1..n in prediction order. Every image is kept, including
    images without any surviving prediction.
    """
    images = tuple(images)
    categories = tuple(categories)
    index = {im.id: im for im in images}
    cat_ids = {c.id for c in categories}
    anns = []
    for i, p in enumerate(preds, start=1):
        if p.category_id not in cat_ids:
            raise ReferentialError(f"prediction {i}: category_id {p.category_id} not in category table")
        if p.image_id not in index:
            raise ReferentialError(f"prediction {i}: image_id {p.image_id} does not resolve")
        anns.append(make_annotation(i, index[p.image_id], p.category_id, p.segmentation, score=p.score, source=PSEUDO))
    return Dataset(images, tuple(anns), categories, dict(provenance or {}))


def _category_table(d: Dataset):
    return [(c.id, c.name) for c in d.categories]


def merge_datasets(d_labeled: Dataset, d_pseudo: Dataset, provenance: Optional[dict] = None) -> Dataset:
    """Disjoint union of the labeled and pseudo-labeled datasets.

    Image and annotation ids are reassigned consecutively from 1, labeled
    block first, each block in ascending original id order. Nothing is
    deduplicated.
    """
    if _category_table(d_labeled) != _category_table(d_pseudo):
        raise ContractError("cannot merge datasets with different category tables")

    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    blocks = {}
    for tag, d in (("labeled", d_labeled), ("pseudo", d_pseudo)):
        id_map = {}
        first_image = len(images) + 1
        for im in d.images:
            new_id = len(images) + 1
            id_map[im.id] = new_id
            images.append(ImageRecord(new_id, im.file_name, im.width, im.height))
        first_ann = len(annotations) + 1
        for a in d.annotations:
            annotations.append(
                Annotation(
                    id=len(annotations) + 1,
                    image_id=id_map[a.image_id],
                    category_id=a.category_id,
                    segmentation=a.segmentation,
                    bbox=a.bbox,
                    area=a.area,
                    score=a.score,
                    source=a.source,
                )
            )
        blocks[tag] = {
            "digest": dataset_digest(d),
            "first_image_id": first_image,
            "images": len(d.images),
            "first_annotation_id": first_ann,
            "annotations": len(d.annotations),
        }
    prov = dict(provenance or {})
    prov["merged_from"] = blocks
    return Dataset(tuple(images), tuple(annotations), d_labeled.categories, prov)


def sources_of(d: Dataset) -> dict[str, int]:
    counts = {LABELED: 0, PSEUDO: 0}
    for a in d.annotations:
        counts[a.source] += 1
    return counts
