"""Efficient temporal transformer: frame tokens, temporal attention, residual map.

Each frame of a clip is embedded to a 1-D token, three independent learnable
positional encodings produce query/key/value-like token sets, and a single
encoder layer (no feed-forward sublayer, no decoder) turns the scaled token
Gram matrix into per-frame attention weights. The attended tokens are mapped
back to frame shape, giving an auxiliary attention map the same size as the
input features, added residually.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .kernel import (
    ConfigError,
    DimensionError,
    Node,
    Parameter,
    add,
    concat,
    conv2d,
    index_select,
    linear,
    matmul,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

__all__ = [
    "EttConfig",
    "EttParams",
    "AttentionMap",
    "embed_frames",
    "add_positional",
    "relation_matrix",
    "inverse_transform",
    "attention_map",
    "ett_forward",
    "export_attention_maps",
    "write_pgm",
]

# An attention map is an ordinary graph node shaped exactly like the feature
# map it augments ([N,C,H,W] per clip, [B,N,C,H,W] stacked).
AttentionMap = Node


@dataclass(frozen=True)
class EttConfig:
    """Dimensions of the temporal transformer for one feature-map geometry.

    ``hidden_dim`` is the token length; it must stay well below the frame
    size (at most a quarter of C*H*W) and at least the frame count so the
    relation matrix is not rank-starved.
    """

    frames: int
    channels: int
    height: int
    width: int
    hidden_dim: int = 64
    embed_channels: int = 4

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"EttConfig.{f.name} must be positive, got {getattr(self, f.name)}")
        frame_size = self.channels * self.height * self.width
        if self.hidden_dim * 4 > frame_size:
            raise ConfigError(f"hidden_dim {self.hidden_dim} too large for frame size "
                              f"{frame_size} (must be <= {frame_size // 4})")
        if self.hidden_dim < self.frames:
            raise ConfigError(f"hidden_dim {self.hidden_dim} must be >= frame count {self.frames}")

    @property
    def frame_size(self) -> int:
        return self.channels * self.height * self.width

    @property
    def embed_size(self) -> int:
        return self.embed_channels * self.height * self.width


@dataclass
class EttParams:
    """Learnable state: embedding h, three positional encodings, scale, inverse h."""

    embed_conv: Parameter   # [C_e, C, 1, 1]
    embed_w: Parameter      # [C_e*H*W, l]
    embed_b: Parameter      # [1, l]
    pe_alpha: Parameter     # [N, l]
    pe_beta: Parameter      # [N, l]
    pe_gamma: Parameter     # [N, l]
    lam: Parameter          # scalar
    inv_w: Parameter        # [l, C_e*H*W]
    inv_b: Parameter        # [1, C_e*H*W]
    inv_conv: Parameter     # [C, C_e, 1, 1]

    @classmethod
    def init(cls, config: EttConfig, rng: np.random.Generator,
             prefix: str = "ett") -> "EttParams":
        n, l = config.frames, config.hidden_dim
        c, ce = config.channels, config.embed_channels
        es = config.embed_size

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        return cls(
            embed_conv=Parameter(f"{prefix}.embed_conv", he((ce, c, 1, 1), c)),
            embed_w=Parameter(f"{prefix}.embed_w", he((es, l), es)),
            embed_b=Parameter(f"{prefix}.embed_b", np.zeros((1, l))),
            # randomly initialized encodings; small std so they do not swamp
            # the embeddings early
            pe_alpha=Parameter(f"{prefix}.pe_alpha", rng.normal(0.0, 0.02, size=(n, l))),
            pe_beta=Parameter(f"{prefix}.pe_beta", rng.normal(0.0, 0.02, size=(n, l))),
            pe_gamma=Parameter(f"{prefix}.pe_gamma", rng.normal(0.0, 0.02, size=(n, l))),
            # scaled-dot-product temperature keeps the softmax unsaturated
            lam=Parameter(f"{prefix}.lam", np.asarray(1.0 / np.sqrt(l))),
            inv_w=Parameter(f"{prefix}.inv_w", he((l, es), l)),
            inv_b=Parameter(f"{prefix}.inv_b", np.zeros((1, es))),
            inv_conv=Parameter(f"{prefix}.inv_conv", he((c, ce, 1, 1), ce)),
        )

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]


def _check_frame_slice(x: Node, config: EttConfig, op: str) -> None:
    expected = (config.frames, config.channels, config.height, config.width)
    if x.value.shape != expected:
        raise DimensionError(f"{op}: expected frame slice {expected}, got {x.value.shape}")


def embed_frames(x: Node, params: EttParams, config: EttConfig) -> Node:
    """h: map a clip's frames [N,C,H,W] to a token matrix [N,l].

    A shared 1x1 convolution compresses channels, then a shared dense layer
    projects each flattened frame to its token; frames are independent.
    """
    _check_frame_slice(x, config, "embed_frames")
    compressed = conv2d(x, params.embed_conv)
    flat = reshape(compressed, (config.frames, config.embed_size))
    return linear(flat, params.embed_w, params.embed_b)


def add_positional(t_hat: Node, pe: Parameter | Node) -> Node:
    """One positional-encoding stream: token matrix plus its [N,l] encoding."""
    return add(t_hat, pe)


def relation_matrix(t_alpha: Node, t_beta: Node, lam: Parameter | Node) -> Node:
    """Scaled token Gram matrix: Z[i,k] = lam * <alpha token i, beta token k>."""
    if t_alpha.value.shape != t_beta.value.shape:
        raise DimensionError(f"relation_matrix: token shapes differ, "
                             f"{t_alpha.value.shape} vs {t_beta.value.shape}")
    return scale(matmul(t_alpha, transpose(t_beta)), lam)


def inverse_transform(tokens: Node, params: EttParams, config: EttConfig) -> Node:
    """h^-1: map tokens [N,l] back to frame shape [N,C,H,W]."""
    flat = linear(tokens, params.inv_w, params.inv_b)
    maps = reshape(flat, (config.frames, config.embed_channels, config.height, config.width))
    return conv2d(maps, params.inv_conv)


def attention_map(z: Node, t_gamma: Node, params: EttParams, config: EttConfig) -> AttentionMap:
    """Row-softmax the relation matrix, mix value tokens, map back to frames.

    Each output token is a convex combination of the gamma-stream tokens.
    """
    weights = softmax_rows(z)
    mixed = matmul(weights, t_gamma)
    return inverse_transform(mixed, params, config)


def ett_forward(x: Node, params: EttParams,
                config: EttConfig) -> tuple[Node, AttentionMap]:
    """Full pass over a rank-5 feature map [B,N,C,H,W].

    Per clip: embed frames, add the three positional-encoding streams,
    build the relation matrix and attention map. Returns the residual sum
    ``A* + x`` and ``A*`` itself (same shape as ``x``).
    """
    if x.value.ndim != 5:
        raise DimensionError(f"ett_forward: expected rank-5 input, got shape {x.value.shape}")
    bsz = x.value.shape[0]
    per_clip = []
    for b in range(bsz):
        clip = index_select(x, 0, b)
        t_hat = embed_frames(clip, params, config)
        t_alpha = add_positional(t_hat, params.pe_alpha)
        t_beta = add_positional(t_hat, params.pe_beta)
        t_gamma = add_positional(t_hat, params.pe_gamma)
        z = relation_matrix(t_alpha, t_beta, params.lam)
        a = attention_map(z, t_gamma, params, config)
        per_clip.append(reshape(a, (1,) + a.value.shape))
    a_star = concat(per_clip, axis=0) if bsz > 1 else per_clip[0]
    return add(a_star, x), a_star


# ---------------------------------------------------------------------------
# attention-map export
# ---------------------------------------------------------------------------

def write_pgm(path: Path | str, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as a binary (P5) PGM file."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise DimensionError(f"write_pgm: expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _saliency(a_frame: np.ndarray) -> np.ndarray:
    # channel-mean magnitude, min-max normalized to [0,1] per frame
    sal = np.abs(a_frame).mean(axis=0)
    lo, hi = sal.min(), sal.max()
    if hi > lo:
        sal = (sal - lo) / (hi - lo)
    else:
        sal = np.zeros_like(sal)
    return sal


def export_attention_maps(a_star: np.ndarray, out_dir: Path | str,
                          frames: np.ndarray | None = None) -> list[Path]:
    """Write one grayscale PGM per (clip, frame) of an attention map [B,N,C,H,W].

    With ``frames`` (raw clips [B,N,3,Hf,Wf]), the saliency is upsampled and
    blended 50/50 over the grayscale input frame instead.
    """
    if a_star.ndim != 5:
        raise DimensionError(f"export_attention_maps: expected rank-5, got shape {a_star.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for b in range(a_star.shape[0]):
        for f_idx in range(a_star.shape[1]):
            sal = _saliency(a_star[b, f_idx])
            if frames is None:
                img = np.round(sal * 255.0).astype(np.uint8)
            else:
                frame = frames[b, f_idx].mean(axis=0)  # grayscale input
                fh, fw = frame.shape
                if fh % sal.shape[0] or fw % sal.shape[1]:
                    raise DimensionError(f"export_attention_maps: frame size {(fh, fw)} is not "
                                         f"a multiple of map size {sal.shape}")
                up = sal.repeat(fh // sal.shape[0], axis=0).repeat(fw // sal.shape[1], axis=1)
                img = np.round((0.5 * up + 0.5 * np.clip(frame, 0.0, 1.0)) * 255.0).astype(np.uint8)
            path = out_dir / f"attn_b{b}_f{f_idx}.pgm"
            write_pgm(path, img)
            written.append(path)
    return written
