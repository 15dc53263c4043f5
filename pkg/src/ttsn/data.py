"""Synthetic directed-motion clips and their bit-exact container format.

Classes come in reversal pairs: a "down" clip is, frame for frame, a
reversed "up" clip (before noise), and likewise "right" mirrors "left", so
the spatial content of a pair is identical and only temporal order separates
them. This is the mechanism-isolating dataset used throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import (
    BadMagicError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
    expect_magic,
    expect_version,
    read_exact,
    read_u32,
    read_u64,
    write_u32,
    write_u64,
)
from .kernel import ConfigError

__all__ = [
    "MotionClass",
    "ClipRecord",
    "motion_classes",
    "generate",
    "default_dataset",
    "shuffle_frames",
    "write_clips",
    "read_clips",
    "MAGIC",
    "VERSION",
]

MAGIC = b"TTSD"
VERSION = 1

SQUARE = 4          # side of the bright moving square, in pixels
STEP = 3            # pixels moved per frame; fast enough that adjacent frames
                    # differ strongly at the backbone's stride-4 resolution


@dataclass(frozen=True)
class MotionClass:
    """A trajectory class and the class whose clips are its time reversals."""

    id: int
    trajectory: str            # up | down | left | right
    reversal_partner: int


@dataclass
class ClipRecord:
    frames: np.ndarray         # [N, 3, H, W] float64 in [0, 1]
    label: int
    clip_id: int


def motion_classes(num_classes: int = 4) -> list[MotionClass]:
    """The reversal-paired class set; supports 2 (up/down) or 4 classes."""
    table = [
        MotionClass(0, "up", 1),
        MotionClass(1, "down", 0),
        MotionClass(2, "left", 3),
        MotionClass(3, "right", 2),
    ]
    if num_classes not in (2, 4):
        raise ConfigError(f"class count must be 2 or 4 (reversal pairs), got {num_classes}")
    return table[:num_classes]


def _base_clip(trajectory: str, n: int, h: int, w: int,
               rng: np.random.Generator) -> np.ndarray:
    """Noise-free clip of a square translating along ``trajectory``."""
    span = (n - 1) * STEP + SQUARE
    frames = np.zeros((n, 3, h, w))
    if trajectory in ("up", "down"):
        x0 = int(rng.integers(0, w - SQUARE + 1))
        y0 = int(rng.integers(0, h - span + 1))
        ys = range(y0 + (n - 1) * STEP, y0 - 1, -STEP) if trajectory == "up" \
            else range(y0, y0 + n * STEP, STEP)
        for t, y in zip(range(n), ys):
            frames[t, :, y:y + SQUARE, x0:x0 + SQUARE] = 1.0
    else:
        y0 = int(rng.integers(0, h - SQUARE + 1))
        x0 = int(rng.integers(0, w - span + 1))
        xs = range(x0 + (n - 1) * STEP, x0 - 1, -STEP) if trajectory == "left" \
            else range(x0, x0 + n * STEP, STEP)
        for t, x in zip(range(n), xs):
            frames[t, :, y0:y0 + SQUARE, x:x + SQUARE] = 1.0
    return frames


def generate(num_per_class: int, frames: int = 8, height: int = 32, width: int = 32,
             noise_std: float = 0.05, seed: int = 7,
             num_classes: int = 4) -> list[ClipRecord]:
    """Generate a balanced clip set with reversal-paired classes.

    For each pair, the higher-id member's clips are exact frame reversals of
    the lower-id member's (before noise), so per-frame statistics cannot
    separate partners. Noise is i.i.d. Gaussian, clamped to [0, 1].
    """
    if height < 16 or width < 16:
        raise ConfigError(f"frame size must be at least 16x16, got {height}x{width}")
    if frames < 4:
        raise ConfigError(f"reversal-pair dataset requires N >= 4 frames, got {frames}")
    span = (frames - 1) * STEP + SQUARE
    if span > height or span > width:
        raise ConfigError(f"trajectory span {span} exceeds frame size {height}x{width}")
    classes = motion_classes(num_classes)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    clips: list[ClipRecord] = []
    clip_id = 0
    for base in classes[::2]:
        partner = classes[base.reversal_partner]
        for _ in range(num_per_class):
            clean = _base_clip(base.trajectory, frames, height, width, rng)
            for cls, raw in ((base, clean), (partner, clean[::-1])):
                noisy = raw + rng.normal(0.0, noise_std, size=raw.shape) if noise_std > 0 else raw.copy()
                clips.append(ClipRecord(np.clip(noisy, 0.0, 1.0), cls.id, clip_id))
                clip_id += 1
    return clips


def default_dataset(seed: int = 7, train_per_class: int = 100, test_per_class: int = 30,
                    **kwargs) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Train/test split with disjoint derived seeds."""
    train_seed, test_seed = (int(s.generate_state(1)[0])
                             for s in np.random.SeedSequence(seed).spawn(2))
    return (generate(train_per_class, seed=train_seed, **kwargs),
            generate(test_per_class, seed=test_seed, **kwargs))


def shuffle_frames(clips: list[ClipRecord], seed: int) -> list[ClipRecord]:
    """Negative control: permute each clip's frames, destroying order."""
    rng = np.random.default_rng(seed)
    return [ClipRecord(c.frames[rng.permutation(c.frames.shape[0])].copy(), c.label, c.clip_id)
            for c in clips]


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------

def write_clips(path: Path | str, clips: list[ClipRecord]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        write_u32(f, VERSION)
        write_u32(f, len(clips))
        for c in clips:
            if c.frames.ndim != 4:
                raise FormatError(f"clip {c.clip_id}: frames must be rank-4, "
                                  f"got shape {c.frames.shape}")
            write_u64(f, c.clip_id)
            write_u32(f, c.label)
            for dim in c.frames.shape:
                write_u32(f, dim)
            f.write(np.ascontiguousarray(c.frames, dtype="<f8").tobytes())


def read_clips(path: Path | str) -> list[ClipRecord]:
    """Read a clip container; the round-trip with :func:`write_clips` is bit-exact.

    Raises :class:`BadMagicError`, :class:`VersionMismatchError` or
    :class:`TruncatedFileError` for the respective corruptions.
    """
    clips = []
    with open(path, "rb") as f:
        expect_magic(f, MAGIC)
        expect_version(f, VERSION)
        count = read_u32(f, "clip count")
        for _ in range(count):
            clip_id = read_u64(f, "clip id")
            label = read_u32(f, "label")
            shape = tuple(read_u32(f, "clip dims") for _ in range(4))
            nbytes = int(np.prod(shape)) * 8
            data = np.frombuffer(read_exact(f, nbytes, "frame data"), dtype="<f8")
            clips.append(ClipRecord(data.reshape(shape).copy(), label, clip_id))
    return clips
