"""Sequential-attention tabular learner.

A self-contained engine for tabular deep learning: a sparse-attention
multi-step encoder trained by gradient descent, masked-feature
self-supervised pretraining with a reconstruction decoder, and mask-based
feature-importance attribution. Built on a minimal numpy tensor core with a
reverse-mode gradient tape.
"""

import os as _os

# Oversubscribed BLAS thread pools slow the small matmuls here down badly;
# pin them to the core count before numpy initializes.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, str(_os.cpu_count() or 1))

from .data import Dataset, FeatureSchema, synth_generate
from .decoder import Decoder, pretrain
from .encoder import ModelConfig, TabularEncoder
from .interpret import compute_importance
from .training import LrSchedule, evaluate, train

__all__ = [
    "Dataset",
    "Decoder",
    "FeatureSchema",
    "LrSchedule",
    "ModelConfig",
    "TabularEncoder",
    "compute_importance",
    "evaluate",
    "pretrain",
    "synth_generate",
    "train",
]

__version__ = "0.1.0"
