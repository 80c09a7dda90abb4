"""Compound domain generalization with latent-domain discovery and
prototype relation modeling, on a self-contained float64 autodiff engine."""

from .config import TrainConfig, load_config, save_config
from .contrast import contrastive_loss_from_features, info_nce, protoccl_loss
from .data import (
    DatasetBundle,
    FoldData,
    Sample,
    TrainView,
    fold_data,
    generate_benchmark,
    leave_one_domain_out,
    read_bundle,
    write_bundle,
)
from .discovery import (
    DomainPredictor,
    Stage1Result,
    bootstrap_pseudo_domains,
    entropy_loss,
    predict_assignments,
    stage1_train,
)
from .model import Encoder
from .pipeline import (
    AblationReport,
    EvalResult,
    Stage2Result,
    classification_loss,
    evaluate,
    run_ablation,
    total_loss,
    train_stage2,
)
from .prototypes import PrototypeBank, ema_update, local_prototypes
from .protograph import GatLayer, ProtoGraphHead, build_adjacency, gat_layer, protogr_forward
from .stylenorm import (
    SDNormLayer,
    channel_stats,
    sdnorm_forward,
    style_vector,
    style_vectors,
    weighted_domain_stats,
)
from .tensor import Tensor, backward, finite_difference_check, forward_op

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
