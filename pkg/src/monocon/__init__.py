"""Monotonic-head contrastive representation learning on dense features.

Small numpy toolkit: autodiff matrices, encoder-adapter plus monotonic MLP
head trained with the supervised contrastive loss, and the compactness /
robustness / disentanglement measurements used to compare heads.
"""

from .data import (
    LabeledDataset,
    SynthSpec,
    generate_synthetic,
    load_checkpoint,
    read_embeddings,
    save_checkpoint,
    split_gallery_query,
    write_embeddings,
)
from .errors import MonoconError
from .metrics import EvalSplit, knn_accuracy, recall_at_k, spearman
from .models import ModelConfig, ModelParams, check_monotone, embed, forward_model, init_params
from .objective import supcon_loss, supcon_loss_oracle
from .optim import TrainConfig, TrainLog, fit
from .spectra import (
    agglomerative_order,
    block_score,
    correlation_matrix,
    effective_dim,
    pca_fit,
    pca_reconstruction_rms,
    spectral_report,
    truncate_embeddings,
)

__version__ = "0.1.0"
