"""Synthetic shapes scenes with exact box ground truth, plus an annotation
file validator applying the 3-8 object / 2% area / crowd filtering rules.

Scenes are flat-color shapes (circle, square, triangle in four colors) drawn
over a smooth textured background. Generation is a pure function of
(spec, seed): the same pair always yields the same scene, so parallel
workers only need disjoint seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ParseError, SpecInfeasible
from .layout import BBox, LayoutObject, Vocabulary, layout_to_json, parse_layout_json
from .rng import numpy_generator

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 220, 50),
}


def default_vocabulary() -> Vocabulary:
    return Vocabulary([f"{c}_{s}" for c in COLORS for s in SHAPES])


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    n_objects: tuple = (3, 8)
    num_categories: int = 12
    min_area_frac: float = 0.02
    max_iou: float = 0.3
    max_tries: int = 200
    background_cells: int = 8
    side_range: tuple = (0.15, 0.6)

    def key(self) -> tuple:
        return (
            self.canvas,
            tuple(self.n_objects),
            self.num_categories,
            self.min_area_frac,
            self.max_iou,
            self.background_cells,
            tuple(self.side_range),
        )


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [-1, 1]
    layout: list = field(default_factory=list)  # list[LayoutObject]
    seed: int = 0


def _iou(a: BBox, b: BBox) -> float:
    ix0, iy0 = max(a.x0, b.x0), max(a.y0, b.y0)
    ix1, iy1 = min(a.x1, b.x1), min(a.y1, b.y1)
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    if inter == 0.0:
        return 0.0
    return inter / (a.area() + b.area() - inter)


def generate_layout(spec: SceneSpec, rng: np.random.Generator) -> list[LayoutObject]:
    """Rejection-sample boxes meeting the area and overlap constraints."""
    lo, hi = spec.n_objects
    n = int(rng.integers(lo, hi + 1))
    objects: list[LayoutObject] = []
    for _ in range(n):
        placed = False
        for _ in range(spec.max_tries):
            w_lo = max(spec.side_range[0], spec.min_area_frac)
            w_hi = max(spec.side_range[1], w_lo)
            w = float(rng.uniform(w_lo, w_hi)) if w_hi > w_lo else w_lo
            h_lo = max(spec.side_range[0], spec.min_area_frac / w)
            h_hi = max(spec.side_range[1], h_lo)
            h = float(rng.uniform(h_lo, h_hi)) if h_hi > h_lo else h_lo
            x0 = float(rng.uniform(0.0, 1.0 - w)) if w < 1.0 else 0.0
            y0 = float(rng.uniform(0.0, 1.0 - h)) if h < 1.0 else 0.0
            bbox = BBox(x0, y0, x0 + w, y0 + h)
            if all(_iou(bbox, o.bbox) <= spec.max_iou for o in objects):
                category = int(rng.integers(1, spec.num_categories + 1))
                objects.append(LayoutObject(bbox, category))
                placed = True
                break
        if not placed:
            raise SpecInfeasible(
                f"could not place object {len(objects) + 1} of {n} "
                f"within {spec.max_tries} tries"
            )
    return objects


def _category_parts(category: int) -> tuple[str, str]:
    shape = SHAPES[(category - 1) % len(SHAPES)]
    color = list(COLORS)[(category - 1) // len(SHAPES)]
    return color, shape


def render_scene(
    objects: Sequence[LayoutObject], spec: SceneSpec, rng: np.random.Generator
) -> np.ndarray:
    size = spec.canvas
    cells = spec.background_cells
    base = rng.uniform(90, 165)
    texture = rng.uniform(-35, 35, size=(cells, cells)) + base
    bg = np.asarray(
        Image.fromarray(texture.astype(np.uint8), mode="L").resize(
            (size, size), Image.BILINEAR
        ),
        dtype=np.uint8,
    )
    img = Image.fromarray(np.repeat(bg[:, :, None], 3, axis=2), mode="RGB")
    draw = ImageDraw.Draw(img)
    for obj in objects:
        color, shape = _category_parts(obj.category)
        rgb = COLORS[color]
        x0 = obj.bbox.x0 * size
        y0 = obj.bbox.y0 * size
        x1 = obj.bbox.x1 * size
        y1 = obj.bbox.y1 * size
        if shape == "circle":
            draw.ellipse([x0, y0, x1 - 1, y1 - 1], fill=rgb)
        elif shape == "square":
            draw.rectangle([x0, y0, x1 - 1, y1 - 1], fill=rgb)
        else:
            draw.polygon(
                [((x0 + x1) / 2, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)], fill=rgb
            )
    arr = np.asarray(img, dtype=np.float32)
    return arr / 127.5 - 1.0


def generate_scene(spec: SceneSpec, seed: int) -> Sample:
    rng = numpy_generator("scene", spec.key(), seed)
    objects = generate_layout(spec, rng)
    image = render_scene(objects, spec, rng)
    return Sample(image=image, layout=objects, seed=seed)


class ShapesDataset:
    """Deterministic indexed view over procedurally generated scenes."""

    def __init__(self, spec: SceneSpec, n_scenes: int, base_seed: int = 0):
        self.spec = spec
        self.n_scenes = n_scenes
        self.base_seed = base_seed

    def __len__(self) -> int:
        return self.n_scenes

    def seed_for(self, index: int) -> int:
        from .rng import derive_seed

        return derive_seed("dataset", self.base_seed, index)

    def __getitem__(self, index: int) -> Sample:
        if not (0 <= index < self.n_scenes):
            raise IndexError(index)
        return generate_scene(self.spec, self.seed_for(index))

    def epoch_order(self, epoch_seed: int) -> np.ndarray:
        return numpy_generator("epoch", self.base_seed, epoch_seed).permutation(
            self.n_scenes
        )


def write_manifest(path, dataset: ShapesDataset, vocab: Vocabulary):
    """JSON-lines manifest, one scene descriptor per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for i in range(len(dataset)):
            sample = dataset[i]
            row = {
                "seed": sample.seed,
                "layout": layout_to_json(
                    sample.layout, vocab, (dataset.spec.canvas, dataset.spec.canvas)
                ),
                "image_path": "procedural",
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _coco_report(data: dict) -> dict:
    images = {img["id"]: img for img in data.get("images", [])}
    counts: dict = {img_id: 0 for img_id in images}
    crowd_filtered = 0
    area_violations = 0
    for ann in data.get("annotations", []):
        img = images.get(ann.get("image_id"))
        if img is None:
            continue
        if ann.get("iscrowd", 0):
            crowd_filtered += 1
            continue
        x, y, w, h = ann["bbox"]
        frac = (w * h) / (img["width"] * img["height"])
        if frac < 0.02:
            area_violations += 1
            continue
        counts[ann["image_id"]] += 1
    survivors = sum(1 for c in counts.values() if 3 <= c <= 8)
    return {
        "format": "coco",
        "images": len(images),
        "object_counts": {str(k): v for k, v in counts.items()},
        "crowd_filtered": crowd_filtered,
        "area_violations": area_violations,
        "survivors": survivors,
    }


def _layout_report(data: dict, vocab: Vocabulary) -> dict:
    objects, _ = parse_layout_json(data, vocab)
    violations = sum(1 for o in objects if o.bbox.area() < 0.02)
    kept = len(objects) - violations
    return {
        "format": "layout",
        "images": 1,
        "object_counts": {"0": kept},
        "crowd_filtered": 0,
        "area_violations": violations,
        "survivors": 1 if 3 <= kept <= 8 else 0,
    }


def validate_external_annotations(path, vocab: Vocabulary | None = None) -> dict:
    """Apply the object-count and area filtering rules to an annotation file.

    Accepts either the canonical layout JSON document or a COCO-style
    annotation file (images / annotations with absolute pixel boxes and
    optional iscrowd flags).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ParseError(f"{path} is empty", line=1, position=1)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno, position=exc.colno)
    if isinstance(data, dict) and "annotations" in data and "images" in data:
        return _coco_report(data)
    if isinstance(data, dict) and "objects" in data:
        return _layout_report(data, vocab or default_vocabulary())
    raise ParseError(f"{path}: unrecognized annotation format", line=1, position=1)
