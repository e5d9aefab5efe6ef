"""Checkpoint archive: one zip holding JSON metadata plus named float32 arrays.

Layout inside the archive:
    meta.json            config snapshot, training step, schedule, format_version
    weights/{name}.npy   model weights, names = state_dict keys
    ema/{name}.npy       optional EMA shadow of the same names
    extra/opt.pt         optional optimizer state (torch serialized)

Loading rebuilds the model from the config snapshot and is total: every name
in the architecture's manifest must be present with a matching shape, and no
stray names are tolerated.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .diffusion import NoiseSchedule
from .errors import CheckpointMismatch
from .unet import DenoiserConfig, LayoutUNet

FORMAT_VERSION = 1


def _write_array(zf: zipfile.ZipFile, name: str, tensor: torch.Tensor):
    buf = io.BytesIO()
    np.save(buf, tensor.detach().cpu().numpy().astype(np.float32))
    zf.writestr(name, buf.getvalue())


def save_checkpoint(
    path,
    model: LayoutUNet,
    step: int,
    schedule: NoiseSchedule,
    ema_state: Optional[dict] = None,
    optimizer_state: Optional[dict] = None,
    extra_meta: Optional[dict] = None,
):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_json(),
        "step": int(step),
        "schedule": schedule.to_json(),
        "has_ema": ema_state is not None,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, tensor in model.state_dict().items():
            _write_array(zf, f"weights/{name}.npy", tensor)
        if ema_state is not None:
            for name, tensor in ema_state.items():
                _write_array(zf, f"ema/{name}.npy", tensor)
        if optimizer_state is not None:
            buf = io.BytesIO()
            torch.save(optimizer_state, buf)
            zf.writestr("extra/opt.pt", buf.getvalue())
    tmp.replace(path)


def _load_group(zf: zipfile.ZipFile, prefix: str) -> dict:
    out = {}
    for info in zf.infolist():
        if info.filename.startswith(prefix) and info.filename.endswith(".npy"):
            name = info.filename[len(prefix) : -len(".npy")]
            out[name] = torch.from_numpy(np.load(io.BytesIO(zf.read(info.filename))))
    return out


def _apply_weights(model: LayoutUNet, arrays: dict, group: str):
    manifest = model.state_dict()
    missing = set(manifest) - set(arrays)
    unexpected = set(arrays) - set(manifest)
    if missing or unexpected:
        raise CheckpointMismatch(
            f"{group} arrays do not match manifest: "
            f"missing={sorted(missing)[:5]}, unexpected={sorted(unexpected)[:5]}"
        )
    for name, tensor in arrays.items():
        if tuple(tensor.shape) != tuple(manifest[name].shape):
            raise CheckpointMismatch(
                f"{group}/{name}: shape {tuple(tensor.shape)} != "
                f"expected {tuple(manifest[name].shape)}"
            )
    model.load_state_dict({k: v.to(manifest[k].dtype) for k, v in arrays.items()})


class LoadedCheckpoint:
    def __init__(self, path, meta: dict, model: LayoutUNet, ema_model: Optional[LayoutUNet]):
        self.path = Path(path)
        self.meta = meta
        self.model = model
        self.ema_model = ema_model
        self.config = model.config

    @property
    def step(self) -> int:
        return self.meta["step"]

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(np.array(self.meta["schedule"]["beta"], dtype=np.float64))

    def sampling_model(self) -> LayoutUNet:
        """EMA weights when present, raw weights otherwise."""
        return self.ema_model if self.ema_model is not None else self.model


def load_checkpoint(path, load_optimizer: bool = False):
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise CheckpointMismatch(f"{path} has no meta.json")
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointMismatch(
                f"format_version {meta.get('format_version')} != {FORMAT_VERSION}"
            )
        config = DenoiserConfig.from_json(meta["config"])
        model = LayoutUNet(config)
        _apply_weights(model, _load_group(zf, "weights/"), "weights")
        model.eval()
        ema_model = None
        if meta.get("has_ema"):
            ema_model = LayoutUNet(config)
            _apply_weights(ema_model, _load_group(zf, "ema/"), "ema")
            ema_model.eval()
        optimizer_state = None
        if load_optimizer and "extra/opt.pt" in zf.namelist():
            optimizer_state = torch.load(
                io.BytesIO(zf.read("extra/opt.pt")), weights_only=False
            )
    loaded = LoadedCheckpoint(path, meta, model, ema_model)
    if load_optimizer:
        return loaded, optimizer_state
    return loaded


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
