"""Toy backbone, loss assembly, optimizer schedule, training and evaluation.

The backbone is a per-frame two-stage strided CNN; the action path runs the
temporal transformer residually on its features and classifies the pooled
result, while the training-only self-supervision path classifies reversal
pseudo-labels on the same features, so both losses constrain the shared
backbone. Everything is seeded and deterministic: identical configs give
bit-identical metrics streams and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO

import numpy as np

from .ett import EttConfig, EttParams, ett_forward
from .formats import (
    FormatError,
    TruncatedFileError,
    expect_magic,
    expect_version,
    read_exact,
    read_u32,
    write_u32,
)
from .kernel import (
    ConfigError,
    Node,
    Parameter,
    add,
    as_tensor,
    backward,
    constant,
    conv2d,
    cross_entropy,
    global_avg_pool,
    linear,
    mean_axis,
    mul,
    relu,
    reshape,
    sgd_step,
)
from .tss import PseudoLabelBatch, SelfClassifierParams, TssAlgorithm, TssRng, apply_variant, self_classifier_forward

__all__ = [
    "TrainConfig",
    "BackboneParams",
    "ActionHeadParams",
    "Model",
    "MetricsRecord",
    "build_model",
    "backbone_forward",
    "action_loss",
    "self_loss",
    "train",
    "evaluate",
    "predict",
    "confusion_counts",
    "config_digest",
    "save_checkpoint",
    "read_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

TSS_CHOICES = ("aa", "ra", "ar", "rr", "off")

CHECKPOINT_MAGIC = b"TTSN"
CHECKPOINT_VERSION = 1

# loss-weight ratio constraint; boundary values are accepted exactly
THETA_RATIO_MIN = 10.0
THETA_RATIO_MAX = 100.0
_RATIO_SLACK = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    """All hyper-parameters of one run."""

    batch_size: int = 4
    frames: int = 8
    channels: int = 3
    height: int = 32
    width: int = 32
    num_classes: int = 4
    theta1: float = 1.0
    theta2: float = 0.1
    lr: float = 0.05
    lr_steps: tuple[int, ...] = (20, 26)
    epochs: int = 30
    hidden_dim: int = 64
    embed_channels: int = 4
    backbone_channels: int = 8
    tss_variant: str = "rr"
    ett_enabled: bool = True
    flat_head: bool = False
    allow_theta_override: bool = False
    seed: int = 7

    def validate(self) -> None:
        for name in ("batch_size", "frames", "channels", "height", "width",
                     "num_classes", "epochs", "hidden_dim", "embed_channels",
                     "backbone_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"frame size must be divisible by 4 (two stride-2 stages), "
                              f"got {self.height}x{self.width}")
        if self.theta1 <= 0:
            raise ConfigError(f"theta1 must be > 0, got {self.theta1}")
        if self.theta2 < 0:
            raise ConfigError(f"theta2 must be >= 0, got {self.theta2}")
        if self.theta2 > 0 and not self.allow_theta_override:
            ratio = self.theta1 / self.theta2
            if not (THETA_RATIO_MIN * (1 - _RATIO_SLACK) <= ratio
                    <= THETA_RATIO_MAX * (1 + _RATIO_SLACK)):
                raise ConfigError(f"theta1/theta2 = {ratio:g} outside [{THETA_RATIO_MIN:g}, "
                                  f"{THETA_RATIO_MAX:g}]; pass allow_theta_override to force")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        steps = tuple(self.lr_steps)
        if any(s2 <= s1 for s1, s2 in zip(steps, steps[1:])):
            raise ConfigError(f"lr_steps must be strictly increasing, got {steps}")
        if any(s < 1 or s >= self.epochs for s in steps):
            raise ConfigError(f"lr_steps must lie in [1, epochs), got {steps} "
                              f"with epochs={self.epochs}")
        if self.tss_variant not in TSS_CHOICES:
            raise ConfigError(f"tss_variant must be one of {TSS_CHOICES}, got "
                              f"{self.tss_variant!r}")
        self.ett_config()  # raises on inconsistent transformer dims

    def ett_config(self) -> EttConfig:
        return EttConfig(frames=self.frames, channels=self.backbone_channels,
                         height=self.height // 4, width=self.width // 4,
                         hidden_dim=self.hidden_dim, embed_channels=self.embed_channels)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch: divided by 10 at each lr step."""
        return self.lr / 10.0 ** sum(1 for s in self.lr_steps if s <= epoch)

    @property
    def tss_algorithm(self) -> TssAlgorithm | None:
        return None if self.tss_variant == "off" else TssAlgorithm(self.tss_variant)


def config_digest(config: TrainConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class BackboneParams:
    # 4x4 stride-2 padding-1 kernels halve each spatial side exactly
    conv1: Parameter   # [Cb, C, 4, 4]
    conv2: Parameter   # [Cb, Cb, 4, 4]

    @classmethod
    def init(cls, channels: int, width: int, rng: np.random.Generator,
             prefix: str = "backbone") -> "BackboneParams":
        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return cls(
            conv1=Parameter(f"{prefix}.conv1", he((width, channels, 4, 4), channels * 16)),
            conv2=Parameter(f"{prefix}.conv2", he((width, width, 4, 4), width * 16)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.conv1, self.conv2]


@dataclass
class ActionHeadParams:
    w: Parameter   # [Cb, num_classes]
    b: Parameter   # [1, num_classes]

    @classmethod
    def init(cls, channels: int, num_classes: int, rng: np.random.Generator,
             prefix: str = "action_head") -> "ActionHeadParams":
        return cls(
            w=Parameter(f"{prefix}.w", rng.normal(0.0, np.sqrt(2.0 / channels),
                                                  size=(channels, num_classes))),
            b=Parameter(f"{prefix}.b", np.zeros((1, num_classes))),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class Model:
    """Backbone, temporal transformer, action head and self-supervision head.

    The backbone is shared by both loss paths; the two heads are disjoint.
    """

    def __init__(self, config: TrainConfig, backbone: BackboneParams, ett: EttParams,
                 action_head: ActionHeadParams, self_head: SelfClassifierParams):
        self.config = config
        self.ett_config = config.ett_config()
        self.backbone = backbone
        self.ett = ett
        self.action_head = action_head
        self.self_head = self_head
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names: {names}")

    def parameters(self) -> list[Parameter]:
        return (self.backbone.parameters() + self.ett.parameters()
                + self.action_head.parameters() + self.self_head.parameters())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((p.name, p.value.copy()) for p in self.parameters())

    def load_state(self, state: "OrderedDict[str, np.ndarray]") -> None:
        params = {p.name: p for p in self.parameters()}
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise FormatError(f"checkpoint parameter mismatch: missing {missing}, "
                              f"unexpected {extra}")
        for name, value in state.items():
            p = params[name]
            if value.shape != p.value.shape:
                raise FormatError(f"checkpoint {name}: shape {value.shape} does not match "
                                  f"model shape {p.value.shape}")
            p.node.value = as_tensor(value)
            p.node.zero_grad()


def build_model(config: TrainConfig, rng: np.random.Generator | None = None) -> Model:
    config.validate()
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[0])
    return Model(
        config,
        BackboneParams.init(config.channels, config.backbone_channels, rng),
        EttParams.init(config.ett_config(), rng),
        ActionHeadParams.init(config.backbone_channels, config.num_classes, rng),
        SelfClassifierParams.init(config.frames, rng),
    )


# ---------------------------------------------------------------------------
# forward paths and losses
# ---------------------------------------------------------------------------

def backbone_forward(clips: Node, backbone: BackboneParams, config: TrainConfig) -> Node:
    """Per-frame shared CNN: [B,N,C,H,W] -> [B,N,Cb,H/4,W/4]."""
    bsz, n, c, h, w = clips.value.shape
    flat = reshape(clips, (bsz * n, c, h, w))
    x = relu(conv2d(flat, backbone.conv1, stride=2, padding=1))
    x = relu(conv2d(x, backbone.conv2, stride=2, padding=1))
    return reshape(x, (bsz, n, config.backbone_channels, h // 4, w // 4))


def _action_logits(augmented: Node, head: ActionHeadParams) -> Node:
    pooled = global_avg_pool(mean_axis(augmented, 1))        # [B,Cb,1,1]
    flat = reshape(pooled, pooled.value.shape[:2])
    return linear(flat, head.w, head.b)


def action_loss(features: Node, ett_params: EttParams, ett_config: EttConfig,
                head: ActionHeadParams, labels: np.ndarray,
                ett_enabled: bool = True) -> tuple[Node, int, Node | None]:
    """Classification loss over the residually augmented features.

    Returns the loss node, the number of top-1 correct predictions in the
    batch, and the attention map (None with the transformer disabled).
    """
    a_star = None
    augmented = features
    if ett_enabled:
        augmented, a_star = ett_forward(features, ett_params, ett_config)
    logits = _action_logits(augmented, head)
    labels = np.asarray(labels, dtype=np.int64)
    correct = int((logits.value.argmax(axis=1) == labels).sum())
    return cross_entropy(logits, labels), correct, a_star


def self_loss(features: Node, algorithm: TssAlgorithm, self_head: SelfClassifierParams,
              rng: TssRng) -> tuple[Node, PseudoLabelBatch]:
    """Reversal-detection loss on pseudo-labeled features (training only)."""
    pseudo = apply_variant(features, algorithm, rng)
    logits = self_classifier_forward(pseudo, self_head)
    return cross_entropy(logits, pseudo.label_array), pseudo


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    scope: str                 # "step" or "epoch"
    epoch: int
    step: int
    l_action: float
    l_self: float | None
    total: float
    train_acc: float
    test_acc: float | None
    lam: float
    lr: float
    tss_selected: list[bool] | None = None
    tss_channels: list[int | None] | None = None
    wall_clock: float = 0.0    # not part of the serialized stream

    def to_json(self) -> str:
        payload = {f.name: getattr(self, f.name) for f in fields(self)
                   if f.name != "wall_clock"}
        return json.dumps(payload, sort_keys=True)


def _emit(record: MetricsRecord, stream: IO[str] | None, echo: bool) -> None:
    line = record.to_json()
    if stream is not None:
        stream.write(line + "\n")
    if echo:
        print(line)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _check_dataset(config: TrainConfig, clips, what: str) -> None:
    expected = (config.frames, config.channels, config.height, config.width)
    for c in clips:
        if c.frames.shape != expected:
            raise ConfigError(f"{what}: clip {c.clip_id} has shape {c.frames.shape}, "
                              f"config expects {expected}")
        if not 0 <= c.label < config.num_classes:
            raise ConfigError(f"{what}: clip {c.clip_id} label {c.label} outside "
                              f"[0, {config.num_classes})")


def _batch_arrays(clips) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([c.frames for c in clips])
    y = np.asarray([c.label for c in clips], dtype=np.int64)
    return x, y


def train(config: TrainConfig, train_clips, test_clips=None,
          metrics_path: Path | str | None = None,
          echo: bool = False) -> tuple[Model, list[MetricsRecord]]:
    """Seeded SGD over the clip set; returns the model and all metrics records.

    The learning rate is divided by 10 at each configured epoch. When the
    self-supervision variant is active its loss is computed every step; with
    theta2 = 0 it is logged but kept out of the backward pass, so the
    parameter trajectory is bit-identical to a run with the variant off.
    Incomplete trailing batches are dropped (shapes stay fixed for a run).
    """
    config.validate()
    _check_dataset(config, train_clips, "train set")
    if test_clips is not None:
        _check_dataset(config, test_clips, "test set")
    if len(train_clips) < config.batch_size:
        raise ConfigError(f"need at least one full batch ({config.batch_size} clips), "
                          f"got {len(train_clips)}")

    init_ss, shuffle_ss, tss_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = build_model(config, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    algorithm = config.tss_algorithm
    tss_rng = TssRng(int(tss_ss.generate_state(1)[0])) if algorithm is not None else None

    t1 = constant(np.asarray(config.theta1))
    t2 = constant(np.asarray(config.theta2))
    steps_per_epoch = len(train_clips) // config.batch_size
    records: list[MetricsRecord] = []
    stream = open(metrics_path, "w") if metrics_path is not None else None
    started = time.perf_counter()
    try:
        if stream is not None:
            header = json.dumps({"config_sha256": config_digest(config),
                                 "code_version": _code_version()}, sort_keys=True)
            stream.write(header + "\n")
            if echo:
                print(header)
        global_step = 0
        for epoch in range(1, config.epochs + 1):
            lr = config.lr_at(epoch)
            order = shuffle_rng.permutation(len(train_clips))
            epoch_correct = epoch_seen = 0
            epoch_la, epoch_ls, epoch_total = [], [], []
            for b in range(steps_per_epoch):
                batch = [train_clips[i] for i in order[b * config.batch_size:
                                                       (b + 1) * config.batch_size]]
                x, labels = _batch_arrays(batch)
                features = backbone_forward(constant(x), model.backbone, config)
                la_node, correct, _ = action_loss(features, model.ett, model.ett_config,
                                                  model.action_head, labels,
                                                  config.ett_enabled)
                pseudo = None
                ls_val = None
                loss = mul(la_node, t1)
                if algorithm is not None:
                    ls_node, pseudo = self_loss(features, algorithm, model.self_head, tss_rng)
                    ls_val = float(ls_node.value)
                    if config.theta2 > 0:
                        loss = add(loss, mul(ls_node, t2))
                backward(loss)
                sgd_step(model.parameters(), lr)

                global_step += 1
                epoch_correct += correct
                epoch_seen += len(batch)
                la_val = float(la_node.value)
                total = config.theta1 * la_val + config.theta2 * (ls_val or 0.0)
                epoch_la.append(la_val)
                epoch_ls.append(ls_val)
                epoch_total.append(total)
                rec = MetricsRecord(
                    scope="step", epoch=epoch, step=global_step,
                    l_action=la_val, l_self=ls_val, total=total,
                    train_acc=correct / len(batch), test_acc=None,
                    lam=float(model.ett.lam.value), lr=lr,
                    tss_selected=list(pseudo.selected) if pseudo else None,
                    tss_channels=list(pseudo.channels) if pseudo else None,
                    wall_clock=time.perf_counter() - started,
                )
                records.append(rec)
                _emit(rec, stream, echo)

            test_acc = evaluate(model, test_clips) if test_clips is not None else None
            ls_vals = [v for v in epoch_ls if v is not None]
            rec = MetricsRecord(
                scope="epoch", epoch=epoch, step=global_step,
                l_action=float(np.mean(epoch_la)),
                l_self=float(np.mean(ls_vals)) if ls_vals else None,
                total=float(np.mean(epoch_total)),
                train_acc=epoch_correct / epoch_seen, test_acc=test_acc,
                lam=float(model.ett.lam.value), lr=lr,
                wall_clock=time.perf_counter() - started,
            )
            records.append(rec)
            _emit(rec, stream, echo)
    finally:
        if stream is not None:
            stream.close()
    return model, records


def predict(model: Model, clips, batch_size: int | None = None) -> np.ndarray:
    """Test-time path: backbone, temporal transformer and action head only."""
    if not clips:
        return np.zeros(0, dtype=np.int64)
    _check_dataset(model.config, clips, "eval set")
    bsz = batch_size or model.config.batch_size
    preds = []
    for start in range(0, len(clips), bsz):
        x, _ = _batch_arrays(clips[start:start + bsz])
        features = backbone_forward(constant(x), model.backbone, model.config)
        augmented = features
        if model.config.ett_enabled:
            augmented, _ = ett_forward(features, model.ett, model.ett_config)
        logits = _action_logits(augmented, model.action_head)
        preds.append(logits.value.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(model: Model, clips, batch_size: int | None = None) -> float:
    """Top-1 accuracy of the inference path (self-supervision never runs)."""
    labels = np.asarray([c.label for c in clips], dtype=np.int64)
    return float((predict(model, clips, batch_size) == labels).mean())


def confusion_counts(model: Model, clips) -> np.ndarray:
    """Confusion matrix, rows true class, columns predicted class."""
    c = model.config.num_classes
    preds = predict(model, clips)
    mat = np.zeros((c, c), dtype=np.int64)
    for clip, pred in zip(clips, preds):
        mat[clip.label, pred] += 1
    return mat


def _code_version() -> str:
    from . import __version__
    return __version__


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path: Path | str) -> None:
    """Binary dump of all named parameters, in model order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        write_u32(f, CHECKPOINT_VERSION)
        for p in model.parameters():
            name = p.name.encode("utf-8")
            write_u32(f, len(name))
            f.write(name)
            write_u32(f, p.value.ndim)
            for dim in p.value.shape:
                write_u32(f, dim)
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def read_checkpoint(path: Path | str) -> "OrderedDict[str, np.ndarray]":
    """Parse a checkpoint into name -> array, reading records until EOF."""
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as f:
        expect_magic(f, CHECKPOINT_MAGIC)
        expect_version(f, CHECKPOINT_VERSION)
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise TruncatedFileError("truncated file: partial record header")
            name_len = int.from_bytes(head, "little")
            name = read_exact(f, name_len, "parameter name").decode("utf-8")
            rank = read_u32(f, "rank")
            shape = tuple(read_u32(f, "shape") for _ in range(rank))
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            data = np.frombuffer(read_exact(f, nbytes, f"data of {name}"), dtype="<f8")
            state[name] = data.reshape(shape).copy()
    return state
