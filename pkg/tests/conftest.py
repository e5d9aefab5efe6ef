import numpy as np
import pytest
import torch

from ldlab.layout import BBox, LayoutObject, normalize_and_pad_layout
from ldlab.unet import DenoiserConfig, LayoutUNet

# tiny architecture used wherever tests need a real model cheaply
TINY = DenoiserConfig(
    image_size=16,
    hidden_channels=8,
    channel_multipliers=(1, 2),
    res_blocks_per_stage=1,
    fusion_resolutions=(8,),
    fusion_heads=2,
    layout_width=8,
    encoder_depth=1,
    encoder_heads=2,
    sequence_length=4,
    num_categories=12,
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    model = LayoutUNet(TINY)
    model.eval()
    return model


def make_objects(n, num_categories=12, seed=0):
    rng = np.random.default_rng(seed)
    objs = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 0.5, size=2)
        w, h = rng.uniform(0.1, 0.45, size=2)
        objs.append(
            LayoutObject(
                BBox(float(x0), float(y0), float(min(1, x0 + w)), float(min(1, y0 + h))),
                int(rng.integers(1, num_categories + 1)),
            )
        )
    return objs


@pytest.fixture
def three_objects():
    return make_objects(3)


@pytest.fixture
def tiny_layout():
    return normalize_and_pad_layout(make_objects(2), TINY.sequence_length, TINY.num_categories)
