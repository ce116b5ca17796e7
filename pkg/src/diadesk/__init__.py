"""diadesk: desk-scale non-exemplar class-incremental learning on a miniature ViT.

Per-task adapters are mixed per token by signature-vector relevance,
patch-level distillation limits drift of old-task features, and old-class
features are reconstructed from prototypes and current patch tokens to
re-align the classifier without storing any old samples.
"""
from .alignment import pdl_loss, pfr_reconstruct, relative_similarity_delta
from .classifier import CosineClassifier, MarginLossConfig, cosine_logits, margin_ce_loss
from .config import ExperimentConfig, load_config
from .data import Dataset, DatasetSpec, TaskSplit, generate_synthetic, load_raw, make_task_split, write_raw
from .errors import (
    ConfigError,
    DatasetError,
    DegenerateInputError,
    DiaError,
    DimensionError,
    FormatError,
    NonFiniteError,
    NumericError,
    TaskError,
    UsageError,
)
from .linalg import svd
from .pipeline import DIALearner, FinetuneLearner, TrainConfig, run_incremental
from .svd_analysis import subspace_residual, verify_linear_identity, verify_nonlinear_identity
from .tensor import Tensor, backward, no_grad
from .tsai import AdapterBank
from .vit import Backbone, BackboneConfig

__version__ = "0.1.0"
