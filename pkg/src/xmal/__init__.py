"""Cross-modal token-sequence alignment toolbox.

Trainable dual-stream toy encoders over synthetic paired data, stacked
cross-attention similarities at three depths, factorized representation
losses with a confidence-weighted factor similarity, a verified reverse-mode
gradient engine, and a deterministic train/eval/CLI harness.
"""

from .attention import (
    AttentionConfig,
    attend,
    block_similarity,
    global_similarity,
    hierarchical_similarity,
    hinge_normalize,
    token_word_similarity,
)
from .autodiff import (
    Tensor,
    finite_difference_check,
    gradients,
    hinge,
    l2_normalize,
    matmul,
    parameter,
    row_softmax,
)
from .confidence import confidence, factor_pair_similarity
from .data import Dataset, PairItem, SynthConfig, generate, load_dataset, save_dataset
from .errors import XmalError
from .evaluation import dcr_diagnostics, evaluate, recall_at_k
from .factors import (
    FactorSet,
    alignment_loss,
    batch_standardize,
    decoupling_loss,
    factor_covariance,
    project_factors,
)
from .model import Model, ModelConfig
from .objective import MODES, ObjectiveConfig, batch_similarity, nt_xent, total_loss
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "Dataset",
    "FactorSet",
    "MODES",
    "Model",
    "ModelConfig",
    "ObjectiveConfig",
    "PairItem",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "XmalError",
    "alignment_loss",
    "attend",
    "batch_similarity",
    "batch_standardize",
    "block_similarity",
    "confidence",
    "dcr_diagnostics",
    "decoupling_loss",
    "evaluate",
    "factor_covariance",
    "factor_pair_similarity",
    "finite_difference_check",
    "generate",
    "global_similarity",
    "gradients",
    "hierarchical_similarity",
    "hinge",
    "hinge_normalize",
    "l2_normalize",
    "load_checkpoint",
    "load_dataset",
    "matmul",
    "nt_xent",
    "parameter",
    "project_factors",
    "recall_at_k",
    "row_softmax",
    "save_checkpoint",
    "save_dataset",
    "token_word_similarity",
    "total_loss",
    "train",
]
