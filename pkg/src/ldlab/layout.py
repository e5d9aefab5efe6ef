"""Layout data model: boxes, categories, padding, and token embedding.

A layout is a variable-length set of (bbox, category) objects. Before it
reaches the model it is padded to a fixed sequence length k: slot 0 holds a
reserved whole-canvas token (category 0), user objects follow in input
order, and the tail is filled with empty-box padding tokens (category C+1).

Box conventions: the public data model and the JSON schema use
(x0, y0, x1, y1) with x as a column fraction. All arrays fed to projection
weights use row-major order (row_min, col_min, row_max, col_max) so that
image-patch boxes and object boxes live in one coordinate space.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    DimensionMismatch,
    InvalidBBox,
    InvalidCategory,
    LayoutInvalid,
    TooManyObjects,
)

WHOLE_LAYOUT_CATEGORY = 0


@dataclass(frozen=True)
class BBox:
    """Normalized box, (x0, y0, x1, y1) with x = column fraction."""

    x0: float
    y0: float
    x1: float
    y1: float

    def validate(self) -> "BBox":
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBBox(f"non-finite coordinates {coords}")
        if not (0.0 <= self.x0 <= self.x1 <= 1.0 and 0.0 <= self.y0 <= self.y1 <= 1.0):
            raise InvalidBBox(f"coordinates out of order or range: {coords}")
        return self

    def as_row_major(self) -> tuple[float, float, float, float]:
        """(row_min, col_min, row_max, col_max) for the shared box space."""
        return (self.y0, self.x0, self.y1, self.x1)

    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


FULL_CANVAS_BOX = BBox(0.0, 0.0, 1.0, 1.0)
EMPTY_BOX = BBox(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class LayoutObject:
    bbox: BBox
    category: int


@dataclass(frozen=True)
class PaddedLayout:
    """Fixed-length token sequence: [whole-canvas, user objects..., padding...]."""

    objects: tuple[LayoutObject, ...]
    n_real: int
    k: int
    num_categories: int

    def __post_init__(self):
        if len(self.objects) != self.k:
            raise LayoutInvalid(f"expected {self.k} tokens, got {len(self.objects)}")
        if not (0 <= self.n_real <= self.k - 1):
            raise LayoutInvalid(f"n_real={self.n_real} outside [0, {self.k - 1}]")

    @property
    def padding_category(self) -> int:
        return self.num_categories + 1

    def real_objects(self) -> tuple[LayoutObject, ...]:
        return self.objects[1 : 1 + self.n_real]

    def box_array(self, dtype=np.float32) -> np.ndarray:
        """k x 4 row-major box coordinates."""
        return np.array([o.bbox.as_row_major() for o in self.objects], dtype=dtype)

    def category_array(self) -> np.ndarray:
        return np.array([o.category for o in self.objects], dtype=np.int64)


def null_layout(k: int, num_categories: int) -> PaddedLayout:
    """The empty layout: whole-canvas token plus padding only."""
    return normalize_and_pad_layout([], k, num_categories)


def normalize_and_pad_layout(
    objects: Sequence[LayoutObject], k: int, num_categories: int
) -> PaddedLayout:
    """Validate user objects and pad to the fixed sequence length.

    Capacity is k - 1 because slot 0 is reserved for the whole-canvas token.
    """
    if len(objects) > k - 1:
        raise TooManyObjects(f"{len(objects)} objects exceed capacity {k - 1}")
    for obj in objects:
        obj.bbox.validate()
        if not (1 <= obj.category <= num_categories):
            raise InvalidCategory(
                f"category {obj.category} outside 1..{num_categories}"
            )
    pad = LayoutObject(EMPTY_BOX, num_categories + 1)
    tokens = (
        (LayoutObject(FULL_CANVAS_BOX, WHOLE_LAYOUT_CATEGORY),)
        + tuple(objects)
        + (pad,) * (k - 1 - len(objects))
    )
    return PaddedLayout(tokens, len(objects), k, num_categories)


@dataclass
class LayoutEmbedding:
    """Per-token embeddings: box path, category path, and their sum."""

    box_emb: torch.Tensor  # ... x k x width
    cat_emb: torch.Tensor  # ... x k x width
    tokens: torch.Tensor  # box_emb + cat_emb


class LayoutEmbedder(nn.Module):
    """Projects padded layouts into the shared token space.

    The box projection is bias-free and is the single shared instance also
    used for image-patch boxes, so equal boxes embed identically on both
    paths. Category ids index a learned table with two reserved rows
    (whole-canvas at 0, padding at num_categories + 1).
    """

    def __init__(self, num_categories: int, width: int):
        super().__init__()
        self.num_categories = num_categories
        self.width = width
        self.box_proj = nn.Linear(4, width, bias=False)
        self.cat_table = nn.Embedding(num_categories + 2, width)

    def forward(self, boxes: torch.Tensor, categories: torch.Tensor) -> LayoutEmbedding:
        if boxes.shape[-1] != 4:
            raise DimensionMismatch(f"boxes last dim must be 4, got {boxes.shape[-1]}")
        if boxes.shape[:-1] != categories.shape:
            raise DimensionMismatch(
                f"box/category shapes disagree: {tuple(boxes.shape)} vs {tuple(categories.shape)}"
            )
        box_emb = self.box_proj(boxes)
        cat_emb = self.cat_table(categories)
        return LayoutEmbedding(box_emb, cat_emb, box_emb + cat_emb)


def layout_tensors(
    layouts: PaddedLayout | Sequence[PaddedLayout],
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack one or more padded layouts into (boxes, categories) tensors."""
    if isinstance(layouts, PaddedLayout):
        layouts = [layouts]
    boxes = torch.stack(
        [torch.from_numpy(l.box_array(np.float64)) for l in layouts]
    ).to(dtype)
    cats = torch.stack([torch.from_numpy(l.category_array()) for l in layouts])
    return boxes, cats


def embed_layout(padded: PaddedLayout, embedder: LayoutEmbedder) -> LayoutEmbedding:
    """Embed a single padded layout; returns k x width tensors."""
    param = next(embedder.parameters())
    boxes, cats = layout_tensors(padded, dtype=param.dtype)
    out = embedder(boxes.to(param.device), cats.to(param.device))
    return LayoutEmbedding(out.box_emb[0], out.cat_emb[0], out.tokens[0])


class Vocabulary:
    """Category names; ids are 1-based positions (0 and C+1 are reserved)."""

    def __init__(self, names: Sequence[str]):
        if len(set(names)) != len(names):
            raise LayoutInvalid("duplicate category names")
        self.names = list(names)
        self._ids = {name: i + 1 for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        if name not in self._ids:
            raise InvalidCategory(f"unknown category {name!r}")
        return self._ids[name]

    def name_of(self, cid: int) -> str:
        if not (1 <= cid <= len(self.names)):
            raise InvalidCategory(f"id {cid} outside 1..{len(self.names)}")
        return self.names[cid - 1]

    def to_json(self) -> dict:
        return {"categories": list(self.names)}

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        if not isinstance(data, dict) or "categories" not in data:
            raise LayoutInvalid("vocabulary file must contain a 'categories' list")
        return cls(data["categories"])


def parse_layout_json(
    data: dict, vocab: Vocabulary
) -> tuple[list[LayoutObject], tuple[int, int]]:
    """Parse the canonical layout document into objects plus canvas dims.

    Schema: {"canvas": {"width": int, "height": int},
             "objects": [{"category": name-or-id, "bbox": [x0, y0, x1, y1]}]}
    """
    if not isinstance(data, dict):
        raise LayoutInvalid("layout document must be a JSON object")
    canvas = data.get("canvas", {})
    try:
        dims = (int(canvas["width"]), int(canvas["height"]))
    except (KeyError, TypeError, ValueError):
        raise LayoutInvalid("layout document needs canvas.width and canvas.height")
    raw_objects = data.get("objects")
    if not isinstance(raw_objects, list):
        raise LayoutInvalid("layout document needs an 'objects' list")
    objects = []
    for i, entry in enumerate(raw_objects):
        try:
            raw_box = entry["bbox"]
            raw_cat = entry["category"]
        except (KeyError, TypeError):
            raise LayoutInvalid(f"objects[{i}] needs 'bbox' and 'category'")
        if not (isinstance(raw_box, list) and len(raw_box) == 4):
            raise LayoutInvalid(f"objects[{i}].bbox must be [x0, y0, x1, y1]")
        bbox = BBox(*(float(v) for v in raw_box))
        try:
            bbox.validate()
        except InvalidBBox as exc:
            raise LayoutInvalid(f"objects[{i}].bbox invalid: {exc}")
        if isinstance(raw_cat, str):
            cid = vocab.id_of(raw_cat)
        else:
            cid = int(raw_cat)
            if not (1 <= cid <= len(vocab)):
                raise InvalidCategory(f"objects[{i}].category {cid} outside 1..{len(vocab)}")
        objects.append(LayoutObject(bbox, cid))
    return objects, dims


def layout_to_json(
    objects: Sequence[LayoutObject], vocab: Vocabulary, canvas: tuple[int, int] = (64, 64)
) -> dict:
    return {
        "canvas": {"width": canvas[0], "height": canvas[1]},
        "objects": [
            {"category": vocab.name_of(o.category), "bbox": o.bbox.as_list()}
            for o in objects
        ],
    }


def padded_to_json(
    padded: PaddedLayout, vocab: Vocabulary, canvas: tuple[int, int] = (64, 64)
) -> dict:
    return layout_to_json(padded.real_objects(), vocab, canvas)


def layout_hash(doc: dict) -> str:
    """Stable content hash of a layout document (canonical JSON form)."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
