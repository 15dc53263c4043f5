"""Temporal transformer attention with sequence-reversal self-supervision.

Trains a small 2-D CNN video classifier whose temporal reasoning comes from
two additions: a single-layer temporal transformer that turns frame tokens
into a pixel-level attention map added residually to the features, and a
training-only pretext task that reverses randomly selected clips along the
frame axis and learns to detect the reversal.
"""

import os as _os
import sys as _sys

# TTSN_THREADS caps kernel-internal (BLAS) parallelism; it must be applied
# before numpy initializes its backend, so this runs ahead of any import.
if "TTSN_THREADS" in _os.environ and "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["TTSN_THREADS"])

__version__ = "0.1.0"

from . import data, ett, kernel, training, tss  # noqa: E402
from .data import ClipRecord, MotionClass, generate, motion_classes, read_clips, write_clips  # noqa: E402
from .ett import EttConfig, EttParams, ett_forward, export_attention_maps  # noqa: E402
from .kernel import Node, Parameter, backward, sgd_step  # noqa: E402
from .training import Model, TrainConfig, build_model, evaluate, train  # noqa: E402
from .tss import TssAlgorithm, TssRng, apply_rr, apply_variant, dispatch  # noqa: E402

__all__ = [
    "__version__",
    "data", "ett", "kernel", "training", "tss",
    "ClipRecord", "MotionClass", "generate", "motion_classes", "read_clips", "write_clips",
    "EttConfig", "EttParams", "ett_forward", "export_attention_maps",
    "Node", "Parameter", "backward", "sgd_step",
    "Model", "TrainConfig", "build_model", "evaluate", "train",
    "TssAlgorithm", "TssRng", "apply_rr", "apply_variant", "dispatch",
]
