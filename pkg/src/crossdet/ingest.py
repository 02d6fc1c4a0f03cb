"""Annotation parsing and the provenance-preserving hybrid manifest.

Parsers turn COCO JSON, PASCAL VOC XML, and WIDER-style text listings into
per-dataset raw records; build_manifest resolves raw class names through a
hybrid label space and assembles a single manifest where every image keeps
its origin dataset. Image pixels are never touched, only URIs.

Ignore-flagged annotations (crowd / invalid / difficult) are excluded from
positive assignment and from evaluation matching but suppress negatives
overlapping them.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import (
    CountMismatch,
    DanglingReference,
    InvertedBox,
    MalformedDocument,
    MalformedLine,
    NonPositiveBox,
    UnknownDataset,
)
from .label_space import ConflictMatrix, HybridLabelSpace


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left (x, y) plus positive extents, image units."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise NonPositiveBox(f"box extents must be positive, got {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


def clamp_box(
    x: float, y: float, w: float, h: float, width: float, height: float
) -> tuple[float, float, float, float]:
    """Intersect a raw box with the image rectangle.

    Raises NonPositiveBox when the raw extents are non-positive or nothing
    remains inside the image.
    """
    if w <= 0 or h <= 0:
        raise NonPositiveBox(f"box has non-positive extent: w={w}, h={h}")
    x1 = max(x, 0.0)
    y1 = max(y, 0.0)
    x2 = min(x + w, float(width))
    y2 = min(y + h, float(height))
    if x2 <= x1 or y2 <= y1:
        raise NonPositiveBox(
            f"box ({x}, {y}, {w}, {h}) lies outside the {width}x{height} image"
        )
    return (x1, y1, x2 - x1, y2 - y1)


@dataclass
class RawAnnotation:
    """Parser output before label mapping: class still a source name."""

    class_name: str
    bbox: BBox
    ignore: bool = False
    difficulty: str | None = None


@dataclass
class RawImage:
    dataset: str
    original_id: object
    width: int
    height: int
    uri: str
    annotations: list[RawAnnotation] = field(default_factory=list)


@dataclass
class Annotation:
    bbox: BBox
    hybrid_class: int
    source_dataset: str
    ignore: bool = False
    difficulty: str | None = None


@dataclass
class ImageRecord:
    image_id: int
    dataset: str
    width: int
    height: int
    uri: str
    annotations: list[Annotation] = field(default_factory=list)


# ---------------------------------------------------------------------------
# COCO JSON


def parse_coco(doc: Mapping, dataset: str) -> list[RawImage]:
    """Parse a COCO-style annotation document into raw records.

    Boxes are clamped to image bounds; iscrowd annotations are imported
    with the ignore flag. Every annotation must resolve to a declared image
    and category.
    """
    for table in ("images", "annotations", "categories"):
        if table not in doc:
            raise MalformedDocument(f"COCO document is missing the {table!r} table")

    categories = {}
    for cat in doc["categories"]:
        try:
            categories[cat["id"]] = cat["name"]
        except (KeyError, TypeError) as exc:
            raise MalformedDocument(f"malformed category entry: {cat!r}") from exc

    records: dict[object, RawImage] = {}
    for img in doc["images"]:
        try:
            img_id = img["id"]
            width, height = int(img["width"]), int(img["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDocument(f"malformed image entry: {img!r}") from exc
        if img_id in records:
            raise MalformedDocument(f"duplicate image id {img_id!r}")
        records[img_id] = RawImage(
            dataset, img_id, width, height, str(img.get("file_name", img_id))
        )

    for ann in doc["annotations"]:
        try:
            img_id = ann["image_id"]
            cat_id = ann["category_id"]
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDocument(f"malformed annotation entry: {ann!r}") from exc
        if img_id not in records:
            raise DanglingReference(f"annotation references missing image {img_id!r}")
        if cat_id not in categories:
            raise DanglingReference(f"annotation references missing category {cat_id!r}")
        record = records[img_id]
        cx, cy, cw, ch = clamp_box(x, y, w, h, record.width, record.height)
        record.annotations.append(
            RawAnnotation(
                categories[cat_id],
                BBox(cx, cy, cw, ch),
                ignore=bool(ann.get("iscrowd", 0)),
            )
        )
    return [records[k] for k in records]


def parse_coco_file(path, dataset: str) -> list[RawImage]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"{path}: not valid JSON: {exc}") from exc
    return parse_coco(doc, dataset)


# ---------------------------------------------------------------------------
# PASCAL VOC XML


def parse_voc_document(
    text: str,
    dataset: str,
    original_id: object = None,
    inclusive_extent: bool = False,
) -> RawImage:
    """Parse one VOC XML annotation document.

    bndbox corners are read as 1-based pixel indices: x = xmin - 1,
    y = ymin - 1, and by default w = xmax - xmin (half-open extent, so
    w*h equals the covered pixel count). inclusive_extent=True instead
    applies the historical devkit area convention w = xmax - xmin + 1.
    In both modes xmax <= xmin (or ymax <= ymin) is rejected as inverted.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedDocument(f"not well-formed XML: {exc}") from exc
    size = root.find("size")
    if size is None or size.find("width") is None or size.find("height") is None:
        raise MalformedDocument("VOC document has no size element")
    width = int(size.find("width").text)
    height = int(size.find("height").text)
    filename = root.findtext("filename", default="")
    if original_id is None:
        original_id = filename or "unnamed"

    extra = 1.0 if inclusive_extent else 0.0
    annotations = []
    for obj in root.findall("object"):
        name = obj.findtext("name")
        bnd = obj.find("bndbox")
        if name is None or bnd is None:
            raise MalformedDocument("object element lacks name or bndbox")
        try:
            xmin = float(bnd.findtext("xmin"))
            ymin = float(bnd.findtext("ymin"))
            xmax = float(bnd.findtext("xmax"))
            ymax = float(bnd.findtext("ymax"))
        except (TypeError, ValueError) as exc:
            raise MalformedDocument(f"malformed bndbox in object {name!r}") from exc
        if xmax <= xmin or ymax <= ymin:
            raise InvertedBox(
                f"bndbox ({xmin}, {ymin}, {xmax}, {ymax}) of {name!r} is inverted"
            )
        difficult = obj.findtext("difficult", default="0").strip() == "1"
        x, y, w, h = clamp_box(
            xmin - 1.0, ymin - 1.0, xmax - xmin + extra, ymax - ymin + extra,
            width, height,
        )
        annotations.append(RawAnnotation(name, BBox(x, y, w, h), ignore=difficult))
    return RawImage(dataset, original_id, width, height, filename or str(original_id),
                    annotations)


def parse_voc(
    sources: Iterable, dataset: str, inclusive_extent: bool = False
) -> list[RawImage]:
    """Parse VOC annotations from paths or (original_id, xml_text) pairs."""
    records = []
    for src in sources:
        if isinstance(src, tuple):
            original_id, text = src
        else:
            original_id = str(src)
            with open(src, "r", encoding="utf-8") as fh:
                text = fh.read()
        records.append(
            parse_voc_document(text, dataset, original_id, inclusive_extent)
        )
    return records


# ---------------------------------------------------------------------------
# WIDER-style text listing


def parse_wider(
    text: str,
    dataset: str,
    class_name: str = "face",
    sizes: Mapping[str, tuple[int, int]] | None = None,
    default_size: tuple[int, int] = (1024, 1024),
) -> list[RawImage]:
    """Parse a WIDER-style annotation listing.

    Entries are a path line, a count line, then per-box lines
    "x y w h [blur expression illumination invalid occlusion pose]"; a
    count of zero is followed by one placeholder line of zeros. Boxes with
    the invalid flag set are imported with the ignore flag (or dropped
    when degenerate). The listing carries no image sizes, so they come
    from the optional `sizes` mapping keyed by path, else `default_size`.
    """
    lines = [ln.rstrip("\n") for ln in text.splitlines()]
    records = []
    i = 0

    def looks_like_path(line: str) -> bool:
        toks = line.split()
        if len(toks) != 1:
            return False
        try:
            float(toks[0])
        except ValueError:
            return True
        return False

    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        path = lines[i].strip()
        i += 1
        if i >= len(lines):
            raise CountMismatch(f"entry {path!r} has no count line")
        count_line = lines[i].strip()
        i += 1
        try:
            count = int(count_line)
        except ValueError as exc:
            raise MalformedLine(
                f"entry {path!r}: expected a box count, got {count_line!r}"
            ) from exc
        if count < 0:
            raise MalformedLine(f"entry {path!r}: negative box count {count}")

        width, height = (sizes or {}).get(path, default_size)
        record = RawImage(dataset, path, int(width), int(height), path)

        n_lines = max(count, 1)  # count 0 still consumes one placeholder line
        for k in range(n_lines):
            if i >= len(lines) or (k > 0 or count > 0) and looks_like_path(lines[i]):
                if count == 0 and i >= len(lines):
                    raise CountMismatch(
                        f"entry {path!r}: missing the zero-count placeholder line"
                    )
                raise CountMismatch(
                    f"entry {path!r} declares {count} boxes but has only {k}"
                )
            if count == 0 and looks_like_path(lines[i]):
                raise CountMismatch(
                    f"entry {path!r}: missing the zero-count placeholder line"
                )
            tokens = lines[i].split()
            i += 1
            if len(tokens) < 4:
                raise MalformedLine(
                    f"entry {path!r}: box line has fewer than 4 fields: {lines[i-1]!r}"
                )
            try:
                x, y, w, h = (float(t) for t in tokens[:4])
                flags = [float(t) for t in tokens[4:]]
            except ValueError as exc:
                raise MalformedLine(
                    f"entry {path!r}: non-numeric box line {lines[i-1]!r}"
                ) from exc
            if count == 0:
                continue  # placeholder row of zeros carries no annotation
            invalid = len(flags) >= 4 and flags[3] == 1.0
            if w <= 0 or h <= 0:
                if invalid:
                    continue  # degenerate and already marked unusable
                raise NonPositiveBox(
                    f"entry {path!r}: box ({x}, {y}, {w}, {h}) has non-positive extent"
                )
            cx, cy, cw, ch = clamp_box(x, y, w, h, width, height)
            record.annotations.append(
                RawAnnotation(class_name, BBox(cx, cy, cw, ch), ignore=invalid)
            )
        records.append(record)
    return records


# ---------------------------------------------------------------------------
# Hybrid manifest


class HybridManifest:
    """Unified image + annotation store retaining each image's origin dataset."""

    def __init__(
        self,
        label_space: HybridLabelSpace,
        conflicts: ConflictMatrix,
        images: Sequence[ImageRecord],
    ):
        self.label_space = label_space
        self.conflicts = conflicts
        self.images = list(images)
        for record in self.images:
            if not label_space.has_dataset(record.dataset):
                raise UnknownDataset(
                    f"image {record.image_id} has undeclared dataset {record.dataset!r}"
                )

    def __len__(self) -> int:
        return len(self.images)

    def images_of(self, dataset: str) -> list[ImageRecord]:
        return [rec for rec in self.images if rec.dataset == dataset]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "label_space": self.label_space.to_dict(),
            "conflicts": self.conflicts.to_dict(),
            "images": [
                {
                    "image_id": rec.image_id,
                    "dataset": rec.dataset,
                    "width": rec.width,
                    "height": rec.height,
                    "uri": rec.uri,
                    "boxes": [
                        _box_dict(ann) for ann in rec.annotations
                    ],
                }
                for rec in self.images
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "HybridManifest":
        space = HybridLabelSpace.from_dict(doc["label_space"])
        conflicts = ConflictMatrix.from_dict(doc["conflicts"])
        images = []
        for img in doc["images"]:
            annotations = [
                Annotation(
                    BBox(b["x"], b["y"], b["w"], b["h"]),
                    int(b["class"]),
                    img["dataset"],
                    ignore=bool(b.get("ignore", False)),
                    difficulty=b.get("difficulty"),
                )
                for b in img["boxes"]
            ]
            images.append(
                ImageRecord(
                    int(img["image_id"]),
                    img["dataset"],
                    int(img["width"]),
                    int(img["height"]),
                    img["uri"],
                    annotations,
                )
            )
        return cls(space, conflicts, images)

    @classmethod
    def from_json(cls, text: str) -> "HybridManifest":
        return cls.from_dict(json.loads(text))


def _box_dict(ann: Annotation) -> dict:
    box = {
        "class": ann.hybrid_class,
        "x": ann.bbox.x,
        "y": ann.bbox.y,
        "w": ann.bbox.w,
        "h": ann.bbox.h,
        "ignore": ann.ignore,
    }
    if ann.difficulty is not None:
        box["difficulty"] = ann.difficulty
    return box


def _id_sort_key(value) -> tuple:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return (1, str(value))
    return (0, value)


def build_manifest(
    raw_records: Iterable[RawImage],
    label_space: HybridLabelSpace,
    conflicts: ConflictMatrix,
) -> HybridManifest:
    """Assemble raw per-dataset records into one hybrid manifest.

    Image ids are reassigned to be globally unique and deterministic
    (records sorted by dataset, then original id); raw class names resolve
    through the label space, preserving per-image provenance.
    """
    ordered = sorted(
        raw_records, key=lambda r: (r.dataset, _id_sort_key(r.original_id))
    )
    images = []
    for new_id, raw in enumerate(ordered):
        annotations = [
            Annotation(
                ann.bbox,
                label_space.map_label(raw.dataset, ann.class_name),
                raw.dataset,
                ignore=ann.ignore,
                difficulty=ann.difficulty,
            )
            for ann in raw.annotations
        ]
        images.append(
            ImageRecord(new_id, raw.dataset, raw.width, raw.height, raw.uri, annotations)
        )
    return HybridManifest(label_space, conflicts, images)
