"""Dataset ingestion: Labelme and COCO rectangles to one normalized form.

Class labels are names in both formats; ids are assigned by sorted name
order so the two formats produce identical datasets when they describe
the same boxes. Ingestion never silently drops anything: every entry
that is skipped, clamped, or unreadable lands in the validation report.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .core import AnnotationBox, Box
from .errors import IngestError


@dataclass(frozen=True)
class DatasetItem:
    image_id: str
    image_path: str
    width: int
    height: int
    annotations: tuple[AnnotationBox, ...]


@dataclass(frozen=True)
class Dataset:
    items: tuple[DatasetItem, ...]
    label_map: dict
    split: str = "test"

    def __len__(self) -> int:
        return len(self.items)

    def normalized(self) -> dict:
        """Canonical content view used for equality and hashing."""
        return {
            "split": self.split,
            "label_map": dict(sorted(self.label_map.items())),
            "items": [
                {
                    "image_id": item.image_id,
                    "width": item.width,
                    "height": item.height,
                    "annotations": sorted(
                        [
                            [ann.class_id, *map(float, ann.box.as_tuple())]
                            for ann in item.annotations
                        ]
                    ),
                }
                for item in sorted(self.items, key=lambda i: i.image_id)
            ],
        }

    def to_json(self) -> dict:
        payload = self.normalized()
        payload["version"] = 1
        payload["image_paths"] = {
            item.image_id: item.image_path for item in self.items
        }
        return payload

    def save(self, path: str | Path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")
        return out

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        obj = json.loads(Path(path).read_text())
        items = []
        for entry in obj["items"]:
            anns = tuple(
                AnnotationBox(box=Box(*a[1:]), class_id=int(a[0]))
                for a in entry["annotations"]
            )
            items.append(
                DatasetItem(
                    image_id=entry["image_id"],
                    image_path=obj["image_paths"][entry["image_id"]],
                    width=int(entry["width"]),
                    height=int(entry["height"]),
                    annotations=anns,
                )
            )
        return cls(
            items=tuple(items),
            label_map={k: int(v) for k, v in obj["label_map"].items()},
            split=str(obj.get("split", "test")),
        )

    def content_hash(self) -> str:
        """SHA-256 over image bytes and normalized annotations."""
        digest = hashlib.sha256()
        digest.update(
            json.dumps(self.normalized(), sort_keys=True).encode("utf-8")
        )
        for item in sorted(self.items, key=lambda i: i.image_id):
            digest.update(item.image_id.encode("utf-8"))
            digest.update(Path(item.image_path).read_bytes())
        return digest.hexdigest()


@dataclass
class ValidationReport:
    """Accounting of every input entry seen during ingestion."""

    loaded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def skip(self, source: str, reason: str) -> None:
        self.skipped.append({"source": source, "reason": reason})

    def warn(self, source: str, message: str) -> None:
        self.warnings.append({"source": source, "message": message})

    def to_json(self) -> dict:
        return {
            "loaded": sorted(self.loaded),
            "skipped": self.skipped,
            "warnings": self.warnings,
        }


def _clamp_box(
    box: Box, width: int, height: int, source: str, report: ValidationReport
) -> Box | None:
    if (
        box.x_min >= 0
        and box.y_min >= 0
        and box.x_max <= width
        and box.y_max <= height
    ):
        return box
    x_min = min(max(box.x_min, 0.0), float(width))
    y_min = min(max(box.y_min, 0.0), float(height))
    x_max = min(max(box.x_max, 0.0), float(width))
    y_max = min(max(box.y_max, 0.0), float(height))
    if x_min >= x_max or y_min >= y_max:
        report.skip(source, f"box {box.as_tuple()} lies outside the image")
        return None
    report.warn(source, f"box {box.as_tuple()} clamped to image bounds")
    return Box(x_min, y_min, x_max, y_max)


def _labelme_entries(path: Path, report: ValidationReport):
    """Yield (image_file, label, Box|corner pair, source) from one file."""
    obj = json.loads(path.read_text())
    image_file = obj.get("imagePath")
    if not image_file:
        report.skip(str(path), "labelme file lacks imagePath")
        return None
    width = obj.get("imageWidth")
    height = obj.get("imageHeight")
    shapes = []
    for idx, shape in enumerate(obj.get("shapes", [])):
        source = f"{path}#shapes[{idx}]"
        if shape.get("shape_type", "rectangle") != "rectangle":
            report.skip(source, f"unsupported shape_type {shape.get('shape_type')!r}")
            continue
        points = shape.get("points", [])
        if len(points) != 2:
            report.skip(source, f"rectangle needs 2 points, got {len(points)}")
            continue
        (xa, ya), (xb, yb) = points
        try:
            box = Box(
                min(float(xa), float(xb)),
                min(float(ya), float(yb)),
                max(float(xa), float(xb)),
                max(float(ya), float(yb)),
            )
        except (TypeError, ValueError) as exc:
            report.skip(source, f"bad rectangle points: {exc}")
            continue
        shapes.append((str(shape.get("label", "object")), box, source))
    return str(image_file), width, height, shapes


def ingest_labelme(
    annotation_paths: list[str | Path],
    image_dir: str | Path,
    split: str = "test",
) -> tuple[Dataset, ValidationReport]:
    """One Labelme JSON per image, rectangles only."""
    report = ValidationReport()
    image_dir = Path(image_dir)
    raw_items = []
    for path in sorted(map(Path, annotation_paths)):
        try:
            parsed = _labelme_entries(path, report)
        except (OSError, json.JSONDecodeError) as exc:
            report.skip(str(path), f"unreadable annotation file: {exc}")
            continue
        if parsed is None:
            continue
        image_file, width, height, shapes = parsed
        raw_items.append((path, image_file, width, height, shapes))
    return _assemble(raw_items, image_dir, split, report)


def ingest_coco(
    annotation_path: str | Path,
    image_dir: str | Path,
    split: str = "test",
) -> tuple[Dataset, ValidationReport]:
    """Single COCO JSON with xywh bboxes."""
    report = ValidationReport()
    image_dir = Path(image_dir)
    path = Path(annotation_path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"unreadable COCO file {path}: {exc}") from exc

    categories = {
        int(cat["id"]): str(cat.get("name", cat["id"]))
        for cat in obj.get("categories", [])
    }
    by_image: dict[int, list] = {}
    for idx, ann in enumerate(obj.get("annotations", [])):
        source = f"{path}#annotations[{idx}]"
        bbox = ann.get("bbox")
        if not bbox or len(bbox) != 4:
            report.skip(source, f"bad bbox {bbox!r}")
            continue
        x, y, w, h = map(float, bbox)
        if w <= 0 or h <= 0:
            report.skip(source, f"non-positive bbox size {bbox!r}")
            continue
        label = categories.get(int(ann.get("category_id", -1)))
        if label is None:
            report.skip(source, f"unknown category_id {ann.get('category_id')!r}")
            continue
        by_image.setdefault(int(ann["image_id"]), []).append(
            (label, Box(x, y, x + w, y + h), source)
        )

    raw_items = []
    for image in obj.get("images", []):
        image_file = str(image.get("file_name", ""))
        if not image_file:
            report.skip(f"{path}#images[{image.get('id')}]", "image lacks file_name")
            continue
        raw_items.append(
            (
                path,
                image_file,
                image.get("width"),
                image.get("height"),
                by_image.get(int(image["id"]), []),
            )
        )
    return _assemble(raw_items, image_dir, split, report)


def _assemble(
    raw_items: list, image_dir: Path, split: str, report: ValidationReport
) -> tuple[Dataset, ValidationReport]:
    labels_seen: set[str] = set()
    for _, _, _, _, shapes in raw_items:
        labels_seen.update(label for label, _, _ in shapes)
    label_map = {name: idx for idx, name in enumerate(sorted(labels_seen))}

    items = []
    for ann_path, image_file, width, height, shapes in raw_items:
        image_path = image_dir / image_file
        if not image_path.exists():
            report.skip(str(ann_path), f"image {image_file!r} not found")
            continue
        if not width or not height:
            with Image.open(image_path) as img:
                width, height = img.size
        annotations = []
        for label, box, source in shapes:
            clamped = _clamp_box(box, int(width), int(height), source, report)
            if clamped is None:
                continue
            annotations.append(AnnotationBox(box=clamped, class_id=label_map[label]))
        image_id = Path(image_file).stem
        items.append(
            DatasetItem(
                image_id=image_id,
                image_path=str(image_path),
                width=int(width),
                height=int(height),
                annotations=tuple(annotations),
            )
        )
        report.loaded.append(image_id)
    dataset = Dataset(items=tuple(items), label_map=label_map, split=split)
    return dataset, report


def ingest(
    annotation_paths: list[str | Path],
    image_dir: str | Path,
    fmt: str = "auto",
    split: str = "test",
) -> tuple[Dataset, ValidationReport]:
    """Dispatch on format; ``auto`` sniffs COCO by its top-level keys."""
    paths = [Path(p) for p in annotation_paths]
    if not paths:
        raise IngestError("no annotation files given")
    if fmt == "auto":
        try:
            first = json.loads(paths[0].read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"unreadable annotation file {paths[0]}: {exc}") from exc
        fmt = "coco" if isinstance(first, dict) and "annotations" in first else "labelme"
    if fmt == "coco":
        if len(paths) != 1:
            raise IngestError("COCO ingestion expects exactly one annotation file")
        return ingest_coco(paths[0], image_dir, split)
    if fmt == "labelme":
        return ingest_labelme(paths, image_dir, split)
    raise IngestError(f"unknown annotation format {fmt!r}")
