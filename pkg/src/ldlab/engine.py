"""Sampling engine shared by the CLI and the HTTP service.

One engine wraps one immutable checkpoint. Every image is produced from an
explicit per-image seed derived as derive_seed(request_seed, "image", index),
so any recorded invocation replays bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import LoadedCheckpoint, checkpoint_hash, load_checkpoint
from .data import default_vocabulary
from .diffusion import (
    GuidanceSpec,
    ancestral_sample,
    fast_sample,
    fast_sample_timesteps,
)
from .errors import InvalidStepCount, LayoutInvalid
from .layout import (
    LayoutObject,
    PaddedLayout,
    Vocabulary,
    layout_hash,
    layout_to_json,
    normalize_and_pad_layout,
    null_layout,
)
from .rng import derive_seed

SAMPLERS = ("ancestral", "fast")


def image_to_uint8(x: torch.Tensor) -> np.ndarray:
    """[-1, 1] CHW float tensor -> HWC uint8 array."""
    arr = x.detach().cpu().numpy()
    arr = np.transpose(arr, (1, 2, 0))
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class GeneratedImage:
    pixels: np.ndarray  # HWC uint8
    seed: int
    index: int


class SamplingEngine:
    def __init__(self, loaded: LoadedCheckpoint, vocab: Optional[Vocabulary] = None):
        self.loaded = loaded
        self.model = loaded.sampling_model()
        self.model.eval()
        self.schedule = loaded.schedule()
        self.config = loaded.config
        self.vocab = vocab if vocab is not None else default_vocabulary()
        if len(self.vocab) != self.config.num_categories:
            raise LayoutInvalid(
                f"vocabulary size {len(self.vocab)} != model categories "
                f"{self.config.num_categories}"
            )
        self.checkpoint_hash = checkpoint_hash(loaded.path)

    @classmethod
    def from_path(cls, path, vocab: Optional[Vocabulary] = None) -> "SamplingEngine":
        return cls(load_checkpoint(path), vocab)

    @property
    def max_objects(self) -> int:
        return self.config.sequence_length - 1

    def pad(self, objects: Sequence[LayoutObject]) -> PaddedLayout:
        return normalize_and_pad_layout(
            objects, self.config.sequence_length, self.config.num_categories
        )

    def layout_doc_hash(self, objects: Sequence[LayoutObject]) -> str:
        doc = layout_to_json(
            objects, self.vocab, (self.config.image_size, self.config.image_size)
        )
        return layout_hash(doc)

    def guidance(self, scale: float, form: str = "interp") -> GuidanceSpec:
        return GuidanceSpec(
            scale=scale,
            null_layout=null_layout(
                self.config.sequence_length, self.config.num_categories
            ),
            form=form,
        )

    def resolve_steps(self, steps: Optional[int], sampler: str) -> int:
        if steps is None or steps == 0:
            return self.schedule.T
        fast_sample_timesteps(self.schedule.T, steps)  # validates the range
        if sampler == "ancestral" and steps != self.schedule.T:
            raise InvalidStepCount(
                f"ancestral sampling visits every schedule step; "
                f"use n_steps={self.schedule.T} or the fast sampler"
            )
        return steps

    def sample(
        self,
        objects: Sequence[LayoutObject],
        guidance_scale: float,
        steps: Optional[int],
        n_images: int,
        seed: int,
        sampler: str = "ancestral",
        guidance_form: str = "interp",
    ) -> tuple[list[GeneratedImage], dict]:
        if sampler not in SAMPLERS:
            raise LayoutInvalid(f"unknown sampler {sampler!r}")
        layout = self.pad(objects)
        guidance = self.guidance(guidance_scale, guidance_form)
        steps = self.resolve_steps(steps, sampler)
        shape = (1, self.config.in_channels, self.config.image_size, self.config.image_size)
        images = []
        start = time.time()
        for i in range(n_images):
            image_seed = derive_seed(seed, "image", i)
            if sampler == "fast":
                x = fast_sample(
                    self.model, layout, guidance, self.schedule, steps, image_seed, shape
                )
            else:
                x = ancestral_sample(
                    self.model, layout, guidance, self.schedule, image_seed, shape
                )
            images.append(GeneratedImage(image_to_uint8(x[0]), image_seed, i))
        manifest = {
            "checkpoint_hash": self.checkpoint_hash,
            "layout_hash": self.layout_doc_hash(objects),
            "layout": layout_to_json(
                objects, self.vocab, (self.config.image_size, self.config.image_size)
            ),
            "guidance_scale": guidance_scale,
            "guidance_form": guidance_form,
            "steps": steps,
            "sampler": sampler,
            "seed": seed,
            "n_images": n_images,
            "image_seeds": [img.seed for img in images],
            "elapsed_seconds": round(time.time() - start, 3),
        }
        return images, manifest
