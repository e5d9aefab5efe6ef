"""Command-line entry points: train, sample, eval, validate-data, serve."""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import AppConfig, config_hash, load_config
from .data import (
    ShapesDataset,
    default_vocabulary,
    generate_scene,
    validate_external_annotations,
)
from .engine import SamplingEngine
from .errors import LdlabError
from .layout import Vocabulary, parse_layout_json
from .metrics import ClassifierConfig, diversity_proxy, mini_cas
from .rng import derive_seed
from .training import train
from .unet import LayoutUNet


def _load_app_config(path) -> AppConfig:
    return load_config(path) if path else AppConfig()


def _vocab_arg(path) -> Vocabulary:
    if path:
        return Vocabulary.from_json(json.loads(Path(path).read_text()))
    return default_vocabulary()


def cmd_train(args) -> int:
    config = _load_app_config(args.config)
    model = LayoutUNet(config.model)
    schedule = config.schedule.build()
    spec = config.data.scene_spec(config.model.num_categories)
    dataset = ShapesDataset(spec, config.data.num_scenes, config.data.seed)
    out_dir = Path(args.out or "runs/train")
    final = train(
        model,
        dataset,
        schedule,
        config.training,
        out_dir,
        resume_from=args.resume,
        log_print=True,
    )
    print(f"final checkpoint: {final}")
    return 0


def cmd_sample(args) -> int:
    checkpoint = args.checkpoint or os.environ.get("LDLAB_CHECKPOINT")
    if not checkpoint:
        print("no checkpoint given (use --checkpoint or LDLAB_CHECKPOINT)", file=sys.stderr)
        return 2
    engine = SamplingEngine.from_path(checkpoint, _vocab_arg(args.vocab))
    doc = json.loads(Path(args.layout).read_text())
    objects, _ = parse_layout_json(doc, engine.vocab)
    seed = args.seed if args.seed is not None else secrets.randbits(48)
    images, manifest = engine.sample(
        objects,
        guidance_scale=args.scale,
        steps=args.steps,
        n_images=args.n,
        seed=seed,
        sampler=args.sampler,
    )
    out_dir = Path(args.out or "samples")
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for img in images:
        name = f"sample_{img.index:03d}.png"
        Image.fromarray(img.pixels).save(out_dir / name)
        files.append(name)
    manifest["files"] = files
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(files)} image(s) and manifest.json to {out_dir}")
    return 0


def _held_out_scenes(config: AppConfig, n: int, seed_tag: str):
    spec = config.data.scene_spec(config.model.num_categories)
    seeds = [derive_seed("held-out", seed_tag, i) for i in range(n)]
    return [generate_scene(spec, s) for s in seeds]


def cmd_eval(args) -> int:
    """Generate images for held-out layouts and score controllability/diversity."""
    from .data import Sample

    checkpoint = args.checkpoint or os.environ.get("LDLAB_CHECKPOINT")
    if not checkpoint:
        print("no checkpoint given (use --checkpoint or LDLAB_CHECKPOINT)", file=sys.stderr)
        return 2
    config = _load_app_config(args.config)
    engine = SamplingEngine.from_path(checkpoint, _vocab_arg(args.vocab))
    real = _held_out_scenes(config, args.n_scenes, args.holdout_tag)

    generated = []
    pair_images = []
    for i, scene in enumerate(real):
        images, _ = engine.sample(
            scene.layout,
            guidance_scale=args.scale,
            steps=args.steps,
            n_images=2 if args.diversity else 1,
            seed=derive_seed(args.seed, "eval", i),
            sampler=args.sampler,
        )
        arrays = [img.pixels.astype(np.float32) / 127.5 - 1.0 for img in images]
        generated.append(Sample(image=arrays[0], layout=scene.layout, seed=images[0].seed))
        if args.diversity:
            pair_images.append((arrays[0], arrays[1]))
        if args.progress:
            print(f"generated scene {i + 1}/{len(real)}", flush=True)

    cas_config = ClassifierConfig(
        num_classes=config.model.num_categories, seed=args.seed
    )
    report = mini_cas(generated, real, cas_config)
    reports = [
        {
            "metric": "mini_cas",
            "value": report["value"],
            "std": None,
            "n": report["n_test"],
            "config_hash": config_hash(config),
            "seed": args.seed,
            "per_class": report["per_class"],
            "guidance_scale": args.scale,
            "sampler": args.sampler,
            "steps": args.steps,
        }
    ]
    if args.diversity:
        mean, std = diversity_proxy(pair_images)
        reports.append(
            {
                "metric": "diversity_proxy",
                "value": mean,
                "std": std,
                "n": len(pair_images),
                "config_hash": config_hash(config),
                "seed": args.seed,
            }
        )
    text = json.dumps(reports, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_validate_data(args) -> int:
    report = validate_external_annotations(args.path, _vocab_arg(args.vocab))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    checkpoint = args.checkpoint or os.environ.get("LDLAB_CHECKPOINT")
    if not checkpoint:
        print("no checkpoint given (use --checkpoint or LDLAB_CHECKPOINT)", file=sys.stderr)
        return 2
    config = _load_app_config(args.config)
    engine = SamplingEngine.from_path(checkpoint, _vocab_arg(args.vocab))
    app = create_app(engine, config.service)
    port = args.port or int(os.environ.get("LDLAB_PORT", config.service.port))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="JSON or TOML config file")
    p.add_argument("--out", help="output directory for checkpoints and logs")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample images for a layout file")
    p.add_argument("--checkpoint", help="checkpoint archive (or LDLAB_CHECKPOINT)")
    p.add_argument("--layout", required=True, help="layout JSON document")
    p.add_argument("--scale", type=float, default=1.0, help="guidance scale")
    p.add_argument("--steps", type=int, default=0, help="0 = full schedule")
    p.add_argument("--sampler", choices=["ancestral", "fast"], default="ancestral")
    p.add_argument("-n", type=int, default=1, help="number of images")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")
    p.add_argument("--vocab", help="vocabulary JSON file")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on held-out layouts")
    p.add_argument("--checkpoint", help="checkpoint archive (or LDLAB_CHECKPOINT)")
    p.add_argument("--config", help="config file (dataset and model sections)")
    p.add_argument("--n-scenes", type=int, default=64, dest="n_scenes")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--sampler", choices=["ancestral", "fast"], default="ancestral")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout-tag", default="v1", dest="holdout_tag")
    p.add_argument("--diversity", action="store_true", help="also report the diversity proxy")
    p.add_argument("--progress", action="store_true")
    p.add_argument("--out", help="write the metric report JSON here")
    p.add_argument("--vocab", help="vocabulary JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate-data", help="check an annotation file against the filtering rules")
    p.add_argument("path")
    p.add_argument("--vocab", help="vocabulary JSON file")
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("serve", help="run the HTTP sampling service")
    p.add_argument("--checkpoint", help="checkpoint archive (or LDLAB_CHECKPOINT)")
    p.add_argument("--config", help="config file (service section)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--vocab", help="vocabulary JSON file")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
