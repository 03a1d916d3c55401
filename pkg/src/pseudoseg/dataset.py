"""COCO-style instance segmentation datasets: data model, parsing, canonical
serialization and annotation-consistent geometric transforms.

Only polygon segmentations are supported. RLE masks and crowd regions are
rejected at parse time.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Optional, Sequence

from .errors import ParseError, ReferentialError, ValidationError
from .geometry import (
    check_polygon,
    clip_polygon,
    polygons_bbox,
    rasterize,
    round_coord,
)

LABELED = "labeled"
PSEUDO = "pseudo"
SOURCES = (LABELED, PSEUDO)

ARCADE_NUM_CLASSES = 25
ARCADE_IMAGE_SIZE = 512

Polygon = tuple[float, ...]


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.id}: non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    segmentation: tuple[Polygon, ...]
    bbox: tuple[float, float, float, float]
    area: int
    score: Optional[float] = None
    source: str = LABELED


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...] = ()
    annotations: tuple[Annotation, ...] = ()
    categories: tuple[Category, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        # canonical order: everything sorted by id
        object.__setattr__(self, "images", tuple(sorted(self.images, key=lambda r: r.id)))
        object.__setattr__(self, "annotations", tuple(sorted(self.annotations, key=lambda r: r.id)))
        object.__setattr__(self, "categories", tuple(sorted(self.categories, key=lambda r: r.id)))
        _check_unique(self.images, "image")
        _check_unique(self.annotations, "annotation")
        _check_unique(self.categories, "category")
        image_ids = {im.id for im in self.images}
        cat_ids = {c.id for c in self.categories}
        for a in self.annotations:
            if a.image_id not in image_ids:
                raise ReferentialError(f"annotation {a.id}: image_id {a.image_id} does not resolve")
            if a.category_id not in cat_ids:
                raise ReferentialError(f"annotation {a.id}: category_id {a.category_id} does not resolve")

    def image_index(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out


def _check_unique(records, what):
    seen = set()
    for r in records:
        if r.id in seen:
            raise ValidationError(f"duplicate {what} id {r.id}")
        seen.add(r.id)


def make_annotation(
    id: int,
    image: ImageRecord,
    category_id: int,
    segmentation: Iterable[Sequence[float]],
    score: Optional[float] = None,
    source: str = LABELED,
) -> Annotation:
    """Build a validated annotation with bbox and area derived from its polygons.

    Coordinates and score are snapped to 6 decimals so that the annotation
    survives a serialization round trip unchanged.
    """
    polys = []
    for poly in segmentation:
        check_polygon(poly, f"annotation {id}")
        p = tuple(round_coord(v) for v in poly)
        xs, ys = p[0::2], p[1::2]
        if min(xs) < 0 or min(ys) < 0 or max(xs) > image.width or max(ys) > image.height:
            raise ValidationError(
                f"annotation {id}: polygon leaves image {image.id} bounds {image.width}x{image.height}"
            )
        polys.append(p)
    if not polys:
        raise ValidationError(f"annotation {id}: empty segmentation")
    if score is not None:
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ValidationError(f"annotation {id}: score {score!r} outside [0, 1]")
        score = round(float(score), 6)
    if source not in SOURCES:
        raise ValidationError(f"annotation {id}: unknown source {source!r}")
    area = int(rasterize(polys, image.width, image.height).sum())
    return Annotation(
        id=id,
        image_id=image.id,
        category_id=category_id,
        segmentation=tuple(polys),
        bbox=tuple(polygons_bbox(polys)),
        area=area,
        score=score,
        source=source,
    )


def annotation_mask(a: Annotation, image: ImageRecord):
    return rasterize(a.segmentation, image.width, image.height)


# -- parsing -----------------------------------------------------------------

_KNOWN_KEYS = {"images", "annotations", "categories", "provenance"}


def _positive_int(obj: dict, key: str, what: str) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
        raise ValidationError(f"{what}: '{key}' must be a positive integer, got {v!r}")
    return v


def _array(doc: dict, key: str, required: bool = True) -> list:
    if key not in doc:
        if required:
            raise ValidationError(f"document has no '{key}' array")
        return []
    v = doc[key]
    if not isinstance(v, list):
        raise ValidationError(f"'{key}' must be an array")
    return v


def parse_dataset(document: str | bytes) -> Dataset:
    """Parse a COCO-style JSON document into a validated :class:`Dataset`.

    Unknown top-level keys are kept in ``provenance``. ``bbox`` and ``area``
    are always recomputed from the polygons, since the area is defined as the
    rasterized pixel count.
    """
    if isinstance(document, bytes):
        try:
            text = document.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError("document is not valid UTF-8", e.start) from e
    else:
        text = document
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        # JSONDecodeError.pos counts characters; report bytes
        raise ParseError(f"malformed JSON: {e.msg}", len(text[: e.pos].encode("utf-8"))) from e
    if not isinstance(doc, dict):
        raise ValidationError("top-level JSON value must be an object")

    categories = []
    for c in _array(doc, "categories"):
        if not isinstance(c, dict):
            raise ValidationError("category entries must be objects")
        cid = _positive_int(c, "id", "category")
        name = c.get("name")
        if not isinstance(name, str):
            raise ValidationError(f"category {cid}: 'name' must be a string")
        categories.append(Category(cid, name))

    images = []
    for im in _array(doc, "images"):
        if not isinstance(im, dict):
            raise ValidationError("image entries must be objects")
        iid = _positive_int(im, "id", "image")
        fname = im.get("file_name")
        if not isinstance(fname, str):
            raise ValidationError(f"image {iid}: 'file_name' must be a string")
        images.append(
            ImageRecord(iid, fname, _positive_int(im, "width", f"image {iid}"), _positive_int(im, "height", f"image {iid}"))
        )
    image_index = {}
    for im in images:
        if im.id in image_index:
            raise ValidationError(f"duplicate image id {im.id}")
        image_index[im.id] = im
    cat_ids = {c.id for c in categories}

    annotations = []
    for a in _array(doc, "annotations", required=False):
        if not isinstance(a, dict):
            raise ValidationError("annotation entries must be objects")
        aid = _positive_int(a, "id", "annotation")
        image_id = a.get("image_id")
        if image_id not in image_index:
            raise ReferentialError(f"annotation {aid}: image_id {image_id!r} does not resolve")
        category_id = a.get("category_id")
        if category_id not in cat_ids:
            raise ReferentialError(f"annotation {aid}: category_id {category_id!r} does not resolve")
        if a.get("iscrowd"):
            raise ValidationError(f"annotation {aid}: crowd annotations are not supported")
        seg = a.get("segmentation")
        if isinstance(seg, dict):
            raise ValidationError(f"annotation {aid}: RLE segmentation is not supported")
        if not isinstance(seg, list) or not all(isinstance(p, list) for p in seg):
            raise ValidationError(f"annotation {aid}: segmentation must be a list of polygons")
        annotations.append(
            make_annotation(
                aid,
                image_index[image_id],
                category_id,
                seg,
                score=a.get("score"),
                source=a.get("source", LABELED),
            )
        )

    provenance = doc.get("provenance", {})
    if not isinstance(provenance, dict):
        raise ValidationError("'provenance' must be an object")
    provenance = dict(provenance)
    for k, v in doc.items():
        if k not in _KNOWN_KEYS:
            provenance[k] = v
    return Dataset(tuple(images), tuple(annotations), tuple(categories), provenance)


# -- serialization -------------------------------------------------------------


def _num(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _nums(vs) -> str:
    return "[" + ",".join(_num(v) for v in vs) + "]"


def _str(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def _annotation_json(a: Annotation) -> str:
    parts = [
        f'"id":{a.id}',
        f'"image_id":{a.image_id}',
        f'"category_id":{a.category_id}',
        '"segmentation":[' + ",".join(_nums(p) for p in a.segmentation) + "]",
        f'"bbox":{_nums(a.bbox)}',
        f'"area":{a.area}',
    ]
    if a.score is not None:
        parts.append(f'"score":{_num(a.score)}')
    parts.append(f'"source":{_str(a.source)}')
    return "{" + ",".join(parts) + "}"


def _block(lines: list[str]) -> str:
    if not lines:
        return "[]"
    return "[\n    " + ",\n    ".join(lines) + "\n  ]"


def write_dataset(d: Dataset) -> str:
    """Canonical JSON text: fixed key order, ids ascending, one record per line,
    coordinates and scores as 6-decimal fixed point."""
    images = [
        f'{{"id":{im.id},"file_name":{_str(im.file_name)},"width":{im.width},"height":{im.height}}}'
        for im in sorted(d.images, key=lambda r: r.id)
    ]
    cats = [f'{{"id":{c.id},"name":{_str(c.name)}}}' for c in sorted(d.categories, key=lambda r: r.id)]
    anns = [_annotation_json(a) for a in sorted(d.annotations, key=lambda r: r.id)]
    prov = json.dumps(d.provenance, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return (
        "{\n"
        f'  "provenance": {prov},\n'
        f'  "categories": {_block(cats)},\n'
        f'  "images": {_block(images)},\n'
        f'  "annotations": {_block(anns)}\n'
        "}\n"
    )


def dataset_digest(d: Dataset) -> str:
    return hashlib.sha256(write_dataset(d).encode("utf-8")).hexdigest()


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        return parse_dataset(f.read())


def save_dataset(d: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(write_dataset(d).encode("utf-8"))


# -- geometric transforms ------------------------------------------------------


@dataclass(frozen=True)
class GeometricTransform:
    kind: str = "identity"
    dx: float = 0.0
    dy: float = 0.0
    factor: float = 1.0

    KINDS = ("identity", "hflip", "vflip", "translate", "scale")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        if not (self.factor > 0 and math.isfinite(self.factor)):
            raise ValidationError(f"scale factor must be positive, got {self.factor}")

    @classmethod
    def translate(cls, dx: float, dy: float) -> "GeometricTransform":
        return cls("translate", dx=dx, dy=dy)

    @classmethod
    def scale(cls, factor: float) -> "GeometricTransform":
        return cls("scale", factor=factor)

    def map_point(self, x: float, y: float, width: int, height: int) -> tuple[float, float]:
        if self.kind == "hflip":
            return width - x, y
        if self.kind == "vflip":
            return x, height - y
        if self.kind == "translate":
            return x + self.dx, y + self.dy
        if self.kind == "scale":
            cx, cy = width / 2.0, height / 2.0
            return cx + self.factor * (x - cx), cy + self.factor * (y - cy)
        return x, y


def map_polygon(poly: Sequence[float], t: GeometricTransform, width: int, height: int) -> list[float]:
    """Apply ``t`` to every vertex, without clipping."""
    out: list[float] = []
    for x, y in zip(poly[0::2], poly[1::2]):
        out.extend(t.map_point(x, y, width, height))
    return out


def transform_annotation(a: Annotation, t: GeometricTransform, image: ImageRecord) -> Optional[Annotation]:
    """Map an annotation through ``t`` and clip it to the image.

    Returns ``None`` when nothing usable survives: every polygon clipped to
    fewer than 3 vertices, or the clipped mask covers no pixel.
    """
    if a.image_id != image.id:
        raise ValidationError(f"annotation {a.id} belongs to image {a.image_id}, not {image.id}")
    if t.kind == "identity":
        return a
    polys = []
    for poly in a.segmentation:
        clipped = clip_polygon(map_polygon(poly, t, image.width, image.height), image.width, image.height)
        if len(clipped) >= 6:
            polys.append(tuple(clipped))
    if not polys:
        return None
    out = make_annotation(a.id, image, a.category_id, polys, score=a.score, source=a.source)
    if out.area < 1:
        return None
    return out


def with_provenance(d: Dataset, **extra: Any) -> Dataset:
    prov = dict(d.provenance)
    prov.update(extra)
    return replace(d, provenance=prov)
