"""Command-line entry point: generate | train | eval | attn.

Every training run writes a manifest (resolved config + dataset hash) before
any compute, a JSON-lines metrics stream, and a binary checkpoint into its
run directory, so identical invocations reproduce identical artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import generate, motion_classes, read_clips, write_clips
from .ett import ett_forward, export_attention_maps
from .formats import FormatError
from .kernel import ConfigError, DimensionError, constant
from .training import (
    Model,
    TrainConfig,
    backbone_forward,
    build_model,
    config_digest,
    confusion_counts,
    evaluate,
    read_checkpoint,
    save_checkpoint,
    train,
)

__all__ = ["main", "RunManifest"]

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.ttsn"


@dataclass
class RunManifest:
    """Everything needed to reproduce a run, written before training starts."""

    config: dict
    config_sha256: str
    dataset_path: str
    dataset_sha256: str
    test_dataset_path: str | None
    test_dataset_sha256: str | None
    code_version: str
    out_dir: str

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(path.read_text()))


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _parse_lr_steps(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"lr-steps must be a comma-separated list of epochs, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttsn",
                                     description="directed-motion action recognition runs")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic clip container")
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--per-class", type=int, default=100)
    gen.add_argument("--frames", type=int, default=8)
    gen.add_argument("--size", type=int, default=32, help="square frame side in pixels")
    gen.add_argument("--noise-std", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--test-per-class", type=int, default=0,
                     help="also write a test split with this many clips per class")
    gen.add_argument("--test-out", type=Path, default=None)

    tr = sub.add_parser("train", help="train on a clip container")
    tr.add_argument("--data", type=Path, required=True)
    tr.add_argument("--test-data", type=Path, default=None)
    tr.add_argument("--out-dir", type=Path, required=True)
    tr.add_argument("--theta1", type=float, default=1.0)
    tr.add_argument("--theta2", type=float, default=0.1)
    tr.add_argument("--lr", type=float, default=0.05)
    tr.add_argument("--lr-steps", type=str, default="20,26")
    tr.add_argument("--epochs", type=int, default=30)
    tr.add_argument("--hidden-dim", type=int, default=64)
    tr.add_argument("--embed-channels", type=int, default=4)
    tr.add_argument("--batch-size", type=int, default=4)
    tr.add_argument("--tss", choices=["aa", "ra", "ar", "rr", "off"], default="rr")
    tr.add_argument("--no-ett", action="store_true",
                    help="disable the temporal transformer (ablation baseline)")
    tr.add_argument("--allow-theta-override", action="store_true",
                    help="accept loss weights outside the ratio constraint")
    tr.add_argument("--seed", type=int, default=7)
    tr.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout")

    ev = sub.add_parser("eval", help="evaluate a finished run on a clip container")
    ev.add_argument("--run-dir", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)

    at = sub.add_parser("attn", help="export per-frame attention maps as PGM files")
    at.add_argument("--run-dir", type=Path, required=True)
    at.add_argument("--data", type=Path, required=True)
    at.add_argument("--clip-index", type=int, default=0)
    at.add_argument("--out-dir", type=Path, required=True)
    at.add_argument("--blend", action="store_true",
                    help="overlay the map 50/50 on the grayscale input frame")
    return parser


def cmd_generate(args) -> int:
    clips = generate(args.per_class, frames=args.frames, height=args.size,
                     width=args.size, noise_std=args.noise_std, seed=args.seed,
                     num_classes=args.classes)
    write_clips(args.out, clips)
    names = {m.id: m.trajectory for m in motion_classes(args.classes)}
    counts = {names[m.id]: sum(1 for c in clips if c.label == m.id)
              for m in motion_classes(args.classes)}
    print(f"wrote {len(clips)} clips ({args.frames}x3x{args.size}x{args.size}) "
          f"to {args.out}: {counts}")
    if args.test_per_class:
        if args.test_out is None:
            raise ConfigError("--test-per-class requires --test-out")
        test_seed = int(np.random.SeedSequence(args.seed).spawn(1)[0].generate_state(1)[0])
        test = generate(args.test_per_class, frames=args.frames, height=args.size,
                        width=args.size, noise_std=args.noise_std, seed=test_seed,
                        num_classes=args.classes)
        write_clips(args.test_out, test)
        print(f"wrote {len(test)} test clips to {args.test_out}")
    return 0


def _config_from_args(args, data_dims) -> TrainConfig:
    frames, channels, height, width = data_dims
    return TrainConfig(
        batch_size=args.batch_size, frames=frames, channels=channels,
        height=height, width=width,
        theta1=args.theta1, theta2=args.theta2, lr=args.lr,
        lr_steps=_parse_lr_steps(args.lr_steps), epochs=args.epochs,
        hidden_dim=args.hidden_dim, embed_channels=args.embed_channels,
        tss_variant=args.tss, ett_enabled=not args.no_ett,
        allow_theta_override=args.allow_theta_override, seed=args.seed,
    )


def cmd_train(args) -> int:
    train_clips = read_clips(args.data)
    if not train_clips:
        raise ConfigError(f"dataset {args.data} contains no clips")
    test_clips = read_clips(args.test_data) if args.test_data else None
    config = _config_from_args(args, train_clips[0].frames.shape)
    config.validate()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=asdict(config), config_sha256=config_digest(config),
        dataset_path=str(args.data), dataset_sha256=_sha256_file(Path(args.data)),
        test_dataset_path=str(args.test_data) if args.test_data else None,
        test_dataset_sha256=_sha256_file(Path(args.test_data)) if args.test_data else None,
        code_version=__version__, out_dir=str(out_dir),
    )
    manifest.write(out_dir / MANIFEST_NAME)

    model, records = train(config, train_clips, test_clips,
                           metrics_path=out_dir / METRICS_NAME, echo=not args.quiet)
    save_checkpoint(model, out_dir / CHECKPOINT_NAME)
    final = records[-1]
    summary = f"done: epochs={config.epochs} final train acc {final.train_acc:.3f}"
    if final.test_acc is not None:
        summary += f", test acc {final.test_acc:.3f}"
    print(summary)
    print(f"run artifacts in {out_dir}")
    return 0


def _load_run(run_dir: Path) -> Model:
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {run_dir}")
    manifest = RunManifest.read(manifest_path)
    cfg = dict(manifest.config)
    cfg["lr_steps"] = tuple(cfg["lr_steps"])
    config = TrainConfig(**cfg)
    model = build_model(config)
    model.load_state(read_checkpoint(run_dir / CHECKPOINT_NAME))
    return model


def cmd_eval(args) -> int:
    model = _load_run(Path(args.run_dir))
    clips = read_clips(args.data)
    acc = evaluate(model, clips)
    mat = confusion_counts(model, clips)
    classes = motion_classes(model.config.num_classes)
    names = [m.trajectory for m in classes]
    print(f"top-1 overall: {acc:.4f} ({int(np.trace(mat))}/{len(clips)})")
    print("per-class accuracy:")
    for m in classes:
        total = mat[m.id].sum()
        hit = mat[m.id, m.id]
        print(f"  {m.trajectory:>6}: {hit / max(total, 1):.4f} ({hit}/{total})")
    width = max(len(n) for n in names) + 2
    print("confusion matrix (rows true, cols predicted):")
    print(" " * width + "".join(f"{n:>{width}}" for n in names))
    for m in classes:
        print(f"{m.trajectory:>{width}}" + "".join(f"{v:>{width}}" for v in mat[m.id]))
    print("partner-pair confusion (true class predicted as its reversal partner):")
    for m in classes:
        if m.id < m.reversal_partner:
            count = mat[m.id, m.reversal_partner] + mat[m.reversal_partner, m.id]
            print(f"  {m.trajectory}<->{classes[m.reversal_partner].trajectory}: {count}")
    return 0


def cmd_attn(args) -> int:
    model = _load_run(Path(args.run_dir))
    clips = read_clips(args.data)
    if not 0 <= args.clip_index < len(clips):
        raise ConfigError(f"clip index {args.clip_index} outside dataset of {len(clips)} clips")
    clip = clips[args.clip_index]
    x = clip.frames[None]  # [1,N,3,H,W]
    features = backbone_forward(constant(x), model.backbone, model.config)
    _, a_star = ett_forward(features, model.ett, model.ett_config)
    written = export_attention_maps(a_star.value, args.out_dir,
                                    frames=x if args.blend else None)
    print(f"wrote {len(written)} attention maps for clip {clip.clip_id} "
          f"(label {clip.label}) to {args.out_dir}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"generate": cmd_generate, "train": cmd_train,
               "eval": cmd_eval, "attn": cmd_attn}[args.command]
    try:
        return handler(args)
    except (ConfigError, DimensionError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
