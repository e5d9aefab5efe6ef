"""Training loop: EMA shadow weights, periodic checkpoints, JSONL logging."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ShapesDataset
from .diffusion import NoiseSchedule, training_loss
from .errors import ResumeMismatch
from .layout import normalize_and_pad_layout
from .rng import torch_generator
from .unet import LayoutUNet


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    ema_rate: float = 0.9999
    uncond_prob: float = 0.2
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50


class Ema:
    """Exponential moving average over model parameters and buffers."""

    def __init__(self, model: LayoutUNet, rate: float):
        self.rate = rate
        self.shadow = {
            k: v.detach().clone().float() for k, v in model.state_dict().items()
        }

    @torch.no_grad()
    def update(self, model: LayoutUNet):
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(self.rate).add_(v.float(), alpha=1.0 - self.rate)

    def state_dict(self) -> dict:
        return self.shadow

    def load_state_dict(self, state: dict):
        self.shadow = {k: v.detach().clone().float() for k, v in state.items()}


def _batch(dataset: ShapesDataset, indices, k: int, num_categories: int):
    images, layouts = [], []
    for i in indices:
        sample = dataset[int(i)]
        images.append(torch.from_numpy(sample.image).permute(2, 0, 1))
        layouts.append(normalize_and_pad_layout(sample.layout, k, num_categories))
    return torch.stack(images), layouts


def train(
    model: LayoutUNet,
    dataset: ShapesDataset,
    schedule: NoiseSchedule,
    config: TrainConfig,
    out_dir,
    resume_from: Optional[str] = None,
    log_print: bool = False,
) -> Path:
    """Run the loop; returns the path of the final checkpoint.

    Resuming restores weights, EMA, optimizer state, and the step counter
    from an earlier checkpoint of the same architecture.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"

    opt = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    ema = Ema(model, config.ema_rate)
    start_step = 0

    if resume_from is not None:
        loaded, opt_state = load_checkpoint(resume_from, load_optimizer=True)
        if loaded.config != model.config:
            raise ResumeMismatch(
                "checkpoint config does not match the model being trained"
            )
        model.load_state_dict(loaded.model.state_dict())
        if loaded.ema_model is not None:
            ema.load_state_dict(loaded.ema_model.state_dict())
        if opt_state is not None:
            opt.load_state_dict(opt_state)
        start_step = loaded.step

    k = model.config.sequence_length
    num_categories = model.config.num_categories
    n = len(dataset)
    t0 = time.time()

    def write_checkpoint(step: int, name: str) -> Path:
        path = out_dir / name
        save_checkpoint(
            path,
            model,
            step,
            schedule,
            ema_state=ema.state_dict(),
            optimizer_state=opt.state_dict(),
            extra_meta={"train_config": config.__dict__},
        )
        return path

    if config.iterations <= start_step:
        return write_checkpoint(start_step, f"ckpt_{start_step:08d}.zip")

    model.train()
    log_f = log_path.open("a", encoding="utf-8")
    try:
        order = dataset.epoch_order(config.seed)
        cursor = (start_step * config.batch_size) % n
        for step in range(start_step + 1, config.iterations + 1):
            if cursor + config.batch_size > n:
                order = dataset.epoch_order(config.seed + step)
                cursor = 0
            indices = order[cursor : cursor + config.batch_size]
            cursor += config.batch_size
            x0, layouts = _batch(dataset, indices, k, num_categories)

            rng = torch_generator(config.seed, "loss", step)
            loss = training_loss(
                x0, layouts, model, schedule, config.uncond_prob, rng
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema.update(model)

            if step % config.log_every == 0 or step == config.iterations:
                row = {
                    "step": step,
                    "loss": float(loss.item()),
                    "lr": config.learning_rate,
                    "wallclock": round(time.time() - t0, 3),
                }
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()
                if log_print:
                    print(json.dumps(row), flush=True)
            if step % config.checkpoint_every == 0 and step < config.iterations:
                write_checkpoint(step, f"ckpt_{step:08d}.zip")
    finally:
        log_f.close()
    model.eval()
    return write_checkpoint(config.iterations, f"ckpt_{config.iterations:08d}.zip")


def weights_digest(model: LayoutUNet) -> str:
    """Order-stable hash of all weights, for resume checks."""
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().astype(np.float32).tobytes())
    return h.hexdigest()
