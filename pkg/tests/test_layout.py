import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ldlab.errors import (
    DimensionMismatch,
    InvalidBBox,
    InvalidCategory,
    LayoutInvalid,
    TooManyObjects,
)
from ldlab.layout import (
    BBox,
    LayoutEmbedder,
    LayoutObject,
    Vocabulary,
    embed_layout,
    layout_hash,
    layout_to_json,
    normalize_and_pad_layout,
    null_layout,
    parse_layout_json,
)

C = 12
VOCAB = Vocabulary([f"cat{i}" for i in range(1, C + 1)])


def test_pad_three_objects_structure(three_objects):
    padded = normalize_and_pad_layout(three_objects, 10, C)
    assert padded.k == 10 and padded.n_real == 3
    first = padded.objects[0]
    assert first.bbox == BBox(0, 0, 1, 1) and first.category == 0
    assert padded.objects[1:4] == tuple(three_objects)
    for obj in padded.objects[4:]:
        assert obj.bbox == BBox(0, 0, 0, 0) and obj.category == C + 1


def test_pad_empty_is_null_layout():
    padded = normalize_and_pad_layout([], 10, C)
    assert padded == null_layout(10, C)
    assert padded.n_real == 0
    assert len(padded.objects) == 10


def test_pad_capacity_is_k_minus_one():
    objs = [LayoutObject(BBox(0.1, 0.1, 0.2, 0.2), 1) for _ in range(10)]
    with pytest.raises(TooManyObjects):
        normalize_and_pad_layout(objs, 10, C)
    normalize_and_pad_layout(objs[:9], 10, C)  # exactly at capacity


@pytest.mark.parametrize(
    "bbox",
    [
        BBox(0.5, 0.1, 0.2, 0.2),  # x0 > x1
        BBox(0.1, 0.6, 0.2, 0.2),  # y0 > y1
        BBox(-0.1, 0.1, 0.2, 0.2),
        BBox(0.1, 0.1, 1.2, 0.2),
        BBox(float("nan"), 0.1, 0.2, 0.2),
    ],
)
def test_invalid_bbox_rejected(bbox):
    with pytest.raises(InvalidBBox):
        normalize_and_pad_layout([LayoutObject(bbox, 1)], 10, C)


@pytest.mark.parametrize("category", [0, C + 1, -3, 99])
def test_invalid_category_rejected(category):
    with pytest.raises(InvalidCategory):
        normalize_and_pad_layout([LayoutObject(BBox(0, 0, 0.5, 0.5), category)], 10, C)


def test_row_major_convention():
    b = BBox(0.1, 0.2, 0.3, 0.4)
    assert b.as_row_major() == (0.2, 0.1, 0.4, 0.3)


def test_embed_zero_box_weights_leaves_category_path(three_objects):
    padded = normalize_and_pad_layout(three_objects, 10, C)
    emb = LayoutEmbedder(C, 16)
    torch.nn.init.zeros_(emb.box_proj.weight)
    out = embed_layout(padded, emb)
    assert torch.equal(out.box_emb, torch.zeros_like(out.box_emb))
    assert torch.equal(out.tokens, out.cat_emb)


def test_embed_same_category_different_boxes():
    objs = [
        LayoutObject(BBox(0.0, 0.0, 0.3, 0.3), 5),
        LayoutObject(BBox(0.5, 0.5, 0.9, 0.8), 5),
    ]
    emb = LayoutEmbedder(C, 16)
    out = embed_layout(normalize_and_pad_layout(objs, 4, C), emb)
    assert torch.equal(out.cat_emb[1], out.cat_emb[2])
    assert not torch.equal(out.box_emb[1], out.box_emb[2])


def test_embed_zero_box_matches_padding_box_row():
    objs = [LayoutObject(BBox(0, 0, 0, 0), 3)]
    emb = LayoutEmbedder(C, 16)
    out = embed_layout(normalize_and_pad_layout(objs, 4, C), emb)
    # zero box through a linear map identical to the padding token's zero box
    assert torch.equal(out.box_emb[1], out.box_emb[2])
    assert torch.equal(out.box_emb[1], torch.zeros_like(out.box_emb[1]))


def test_embed_deterministic(three_objects):
    padded = normalize_and_pad_layout(three_objects, 10, C)
    emb = LayoutEmbedder(C, 16)
    a = embed_layout(padded, emb)
    b = embed_layout(padded, emb)
    assert torch.equal(a.tokens, b.tokens)
    assert torch.equal(a.box_emb, b.box_emb)


def test_embed_linearity_in_box_weights(three_objects):
    padded = normalize_and_pad_layout(three_objects, 10, C)
    emb = LayoutEmbedder(C, 16)
    before = embed_layout(padded, emb).box_emb
    with torch.no_grad():
        emb.box_proj.weight.mul_(2.0)
    after = embed_layout(padded, emb).box_emb
    assert torch.equal(after, 2.0 * before)


def test_padding_rows_homogeneous(three_objects):
    padded = normalize_and_pad_layout(three_objects, 10, C)
    emb = LayoutEmbedder(C, 16)
    out = embed_layout(padded, emb)
    pad_rows = out.tokens[1 + padded.n_real :]
    assert torch.equal(pad_rows, pad_rows[0].expand_as(pad_rows))


def test_embed_sum_identity(three_objects):
    padded = normalize_and_pad_layout(three_objects, 10, C)
    out = embed_layout(padded, LayoutEmbedder(C, 16))
    assert torch.equal(out.tokens, out.box_emb + out.cat_emb)


def test_dimension_mismatch():
    emb = LayoutEmbedder(C, 16)
    with pytest.raises(DimensionMismatch):
        emb(torch.zeros(1, 4, 5), torch.zeros(1, 4, dtype=torch.long))
    with pytest.raises(DimensionMismatch):
        emb(torch.zeros(1, 4, 4), torch.zeros(1, 3, dtype=torch.long))


def test_json_round_trip(three_objects):
    padded = normalize_and_pad_layout(three_objects, 10, C)
    doc = layout_to_json(padded.real_objects(), VOCAB, (64, 64))
    parsed, canvas = parse_layout_json(json.loads(json.dumps(doc)), VOCAB)
    assert canvas == (64, 64)
    reparsed = normalize_and_pad_layout(parsed, 10, C)
    assert reparsed == padded


def test_parse_layout_errors():
    with pytest.raises(LayoutInvalid):
        parse_layout_json({"objects": []}, VOCAB)  # missing canvas
    base = {"canvas": {"width": 64, "height": 64}}
    with pytest.raises(LayoutInvalid):
        parse_layout_json({**base, "objects": [{"bbox": [0, 0, 1]}]}, VOCAB)
    with pytest.raises(InvalidCategory):
        parse_layout_json(
            {**base, "objects": [{"category": 99, "bbox": [0, 0, 1, 1]}]}, VOCAB
        )
    with pytest.raises(InvalidCategory):
        parse_layout_json(
            {**base, "objects": [{"category": "nope", "bbox": [0, 0, 1, 1]}]}, VOCAB
        )


def test_vocabulary_lookup():
    assert VOCAB.id_of("cat1") == 1
    assert VOCAB.name_of(12) == "cat12"
    with pytest.raises(InvalidCategory):
        VOCAB.name_of(0)
    with pytest.raises(InvalidCategory):
        VOCAB.id_of("missing")


def test_layout_hash_stable_and_sensitive(three_objects):
    doc = layout_to_json(three_objects, VOCAB, (64, 64))
    assert layout_hash(doc) == layout_hash(json.loads(json.dumps(doc)))
    other = layout_to_json(three_objects[:2], VOCAB, (64, 64))
    assert layout_hash(doc) != layout_hash(other)


coord = st.floats(0.0, 1.0, allow_nan=False, width=32)


@given(
    data=st.lists(
        st.tuples(coord, coord, coord, coord, st.integers(1, C)), min_size=0, max_size=9
    )
)
@settings(max_examples=40, deadline=None)
def test_round_trip_property(data):
    objs = []
    for x0, y0, x1, y1, cat in data:
        x0, x1 = sorted((x0, x1))
        y0, y1 = sorted((y0, y1))
        objs.append(LayoutObject(BBox(x0, y0, x1, y1), cat))
    padded = normalize_and_pad_layout(objs, 10, C)
    doc = layout_to_json(padded.real_objects(), VOCAB)
    parsed, _ = parse_layout_json(json.loads(json.dumps(doc)), VOCAB)
    assert normalize_and_pad_layout(parsed, 10, C) == padded
