"""Temporal sequence self-supervision: reversal pretext task over feature maps.

During training, selected clips have their frame axis reversed and a small
classifier learns to tell reversed from in-order sequences, which constrains
the shared backbone to carry motion-direction information. Four variants
compose three primitives: reversal G, random channel selection H, and random
batch selection K. The module is never used at inference; an invocation
counter makes that checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum

import numpy as np

from .kernel import (
    DimensionError,
    Node,
    Parameter,
    concat,
    conv2d,
    cross_entropy,
    global_avg_pool,
    index_select,
    linear,
    mean_axis,
    relu,
    reshape,
    reverse_axis,
    sub,
)

__all__ = [
    "DegenerateInputError",
    "SequenceLabel",
    "TssAlgorithm",
    "TssRng",
    "PseudoLabelBatch",
    "SelfClassifierParams",
    "dispatch",
    "apply_rr",
    "apply_variant",
    "self_classifier_forward",
    "self_classifier_loss",
    "invocation_count",
    "reset_invocation_count",
]


class DegenerateInputError(ValueError):
    """Input has too few frames for reversal to mean anything."""


class SequenceLabel(IntEnum):
    """Sequence-level pseudo-label: temporal order preserved or reversed."""

    NOR = 0
    REV = 1


class TssAlgorithm(Enum):
    """The four variants; ``composition`` lists the participating primitives."""

    AA = "aa"  # all batches reversed, all channels
    RA = "ra"  # one random batch reversed, all channels
    AR = "ar"  # all batches reversed, one random channel each
    RR = "rr"  # random batches reversed, one random channel each

    @property
    def composition(self) -> tuple[str, ...]:
        return {
            TssAlgorithm.AA: ("G",),
            TssAlgorithm.RA: ("G", "K"),
            TssAlgorithm.AR: ("G", "H"),
            TssAlgorithm.RR: ("G", "H", "K"),
        }[self]

    @property
    def random_channel(self) -> bool:
        return "H" in self.composition

    @property
    def random_batch(self) -> bool:
        return "K" in self.composition


# (rho, eta) -> variant; a coefficient of 0 means the primitive participates.
_DISPATCH = {
    (1, 1): TssAlgorithm.AA,
    (1, 0): TssAlgorithm.RA,
    (0, 1): TssAlgorithm.AR,
    (0, 0): TssAlgorithm.RR,
}


def dispatch(rho: int, eta: int) -> TssAlgorithm:
    """Resolve the hyper-parameter pair (rho, eta) to its algorithm variant."""
    try:
        return _DISPATCH[(rho, eta)]
    except KeyError:
        raise ValueError(f"rho and eta must be 0 or 1, got ({rho}, {eta})") from None


@dataclass
class TssRng:
    """Seeded random state with independent substreams for K and H draws."""

    seed: int
    k_draws: int = field(default=0, init=False)
    h_draws: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        k_ss, h_ss = np.random.SeedSequence(self.seed).spawn(2)
        self._k = np.random.default_rng(k_ss)
        self._h = np.random.default_rng(h_ss)

    def draw_selected(self) -> bool:
        """K for per-batch selection: Bernoulli(1/2), True means selected."""
        self.k_draws += 1
        return bool(self._k.integers(0, 2))

    def draw_batch_index(self, batch_size: int) -> int:
        """K for single-batch selection: uniform batch index."""
        self.k_draws += 1
        return int(self._k.integers(0, batch_size))

    def draw_channel(self, channels: int) -> int:
        """H: uniform channel index."""
        self.h_draws += 1
        return int(self._h.integers(0, channels))


@dataclass
class PseudoLabelBatch:
    """Reduced feature maps plus per-clip NOR/REV labels.

    ``y`` keeps the original batch order (``order`` records the provenance
    permutation), so labels stay aligned with the inputs; the selected /
    not-selected grouping is recoverable from ``selected``. ``channels``
    holds the H draw per clip, or None when all channels were kept.
    """

    y: Node
    labels: tuple[SequenceLabel, ...]
    order: tuple[int, ...]
    selected: tuple[bool, ...]
    channels: tuple[int | None, ...]

    @property
    def label_array(self) -> np.ndarray:
        return np.asarray([int(lab) for lab in self.labels], dtype=np.int64)


_invocations = 0


def invocation_count() -> int:
    return _invocations


def reset_invocation_count() -> None:
    global _invocations
    _invocations = 0


def _check_input(x: Node) -> tuple[int, int, int, int, int]:
    if x.value.ndim != 5:
        raise DimensionError(f"TSS input must be rank-5 [B,N,C,H,W], got shape {x.value.shape}")
    bsz, n, c, h, w = x.value.shape
    if n < 2:
        raise DegenerateInputError(f"temporal reversal needs at least 2 frames, got {n}")
    return bsz, n, c, h, w


def _clip_slice(x: Node, b: int, channel: int | None, reverse: bool,
                n: int, c: int, h: int, w: int) -> Node:
    clip = index_select(x, 0, b)                      # [N,C,H,W]
    if channel is not None:
        clip = reshape(index_select(clip, 1, channel), (n, 1, h, w))
    if reverse:
        clip = reverse_axis(clip, 0)
    cc = 1 if channel is not None else c
    return reshape(clip, (1, n, cc, h, w))


def apply_rr(x: Node, rng: TssRng) -> PseudoLabelBatch:
    """Random batch, random channel reversal.

    Per clip: K draws selected / not-selected; H draws one channel shared by
    all frames of the clip. Not-selected clips keep their frame order and
    are labeled NOR; selected clips are reversed along the frame axis and
    labeled REV. Clips are concatenated back in original batch order.
    """
    global _invocations
    _invocations += 1
    bsz, n, c, h, w = _check_input(x)
    parts, labels, selected, channels = [], [], [], []
    for b in range(bsz):
        is_selected = rng.draw_selected()
        d = rng.draw_channel(c)
        parts.append(_clip_slice(x, b, d, is_selected, n, c, h, w))
        labels.append(SequenceLabel.REV if is_selected else SequenceLabel.NOR)
        selected.append(is_selected)
        channels.append(d)
    y = concat(parts, axis=0) if bsz > 1 else parts[0]
    return PseudoLabelBatch(y, tuple(labels), tuple(range(bsz)),
                            tuple(selected), tuple(channels))


def apply_variant(x: Node, alg: TssAlgorithm, rng: TssRng) -> PseudoLabelBatch:
    """Apply one of the four variants; RR delegates to :func:`apply_rr`."""
    if alg is TssAlgorithm.RR:
        return apply_rr(x, rng)
    global _invocations
    _invocations += 1
    bsz, n, c, h, w = _check_input(x)
    if alg is TssAlgorithm.RA:
        chosen = rng.draw_batch_index(bsz)
        flags = [b == chosen for b in range(bsz)]
    else:  # AA, AR reverse every clip
        flags = [True] * bsz
    parts, labels, channels = [], [], []
    for b in range(bsz):
        d = rng.draw_channel(c) if alg.random_channel else None
        parts.append(_clip_slice(x, b, d, flags[b], n, c, h, w))
        labels.append(SequenceLabel.REV if flags[b] else SequenceLabel.NOR)
        channels.append(d)
    y = concat(parts, axis=0) if bsz > 1 else parts[0]
    return PseudoLabelBatch(y, tuple(labels), tuple(range(bsz)),
                            tuple(flags), tuple(channels))


# ---------------------------------------------------------------------------
# self-supervised classifier
# ---------------------------------------------------------------------------

@dataclass
class SelfClassifierParams:
    """Order-detection head: temporal differences -> conv -> pooled dense."""

    conv: Parameter   # [8, 1, 3, 3]
    w: Parameter      # [8*(N-1), 2]
    b: Parameter      # [1, 2]

    CONV_CHANNELS = 8

    @classmethod
    def init(cls, frames: int, rng: np.random.Generator,
             prefix: str = "self_head") -> "SelfClassifierParams":
        ch = cls.CONV_CHANNELS
        return cls(
            conv=Parameter(f"{prefix}.conv", rng.normal(0.0, np.sqrt(2.0 / 9.0), size=(ch, 1, 3, 3))),
            w=Parameter(f"{prefix}.w", rng.normal(0.0, np.sqrt(2.0 / (ch * (frames - 1))),
                                                  size=(ch * (frames - 1), 2))),
            b=Parameter(f"{prefix}.b", np.zeros((1, 2))),
        )

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]


def self_classifier_forward(batch: PseudoLabelBatch | Node,
                            params: SelfClassifierParams) -> Node:
    """Binary NOR/REV logits [B,2] from all frames of each clip.

    Adjacent-frame differences are the minimal order-sensitive signal: each
    of the N-1 difference maps goes through a shared 3x3 conv, relu and
    global average pooling, and the concatenated pooled features feed a
    dense layer. Multi-channel inputs are channel-averaged first so the head
    is shared across variants.
    """
    y = batch.y if isinstance(batch, PseudoLabelBatch) else batch
    if y.value.ndim != 5:
        raise DimensionError(f"self classifier expects rank-5 input, got shape {y.value.shape}")
    bsz, n, c, h, w = y.value.shape
    if n < 2:
        raise DegenerateInputError(f"need at least 2 frames to form differences, got {n}")
    maps = mean_axis(y, 2) if c > 1 else reshape(y, (bsz, n, h, w))
    diffs = []
    for i in range(n - 1):
        d = sub(index_select(maps, 1, i + 1), index_select(maps, 1, i))
        diffs.append(reshape(d, (bsz, 1, 1, h, w)))
    stacked = concat(diffs, axis=1) if n > 2 else diffs[0]   # [B,N-1,1,H,W]
    flat = reshape(stacked, (bsz * (n - 1), 1, h, w))
    feat = global_avg_pool(relu(conv2d(flat, params.conv, padding=1)))
    pooled = reshape(feat, (bsz, (n - 1) * SelfClassifierParams.CONV_CHANNELS))
    return linear(pooled, params.w, params.b)


def self_classifier_loss(batch: PseudoLabelBatch, params: SelfClassifierParams) -> Node:
    """Cross-entropy of the order-detection logits against the pseudo-labels."""
    return cross_entropy(self_classifier_forward(batch, params), batch.label_array)
