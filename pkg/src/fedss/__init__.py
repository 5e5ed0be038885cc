"""Federated training with sampled-softmax sub-networks, plus the
evaluation and cost-accounting tools around it."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    IngestionError,
    ProtocolViolationError,
)
from .data import (
    Dataset,
    SyntheticDatasetSpec,
    generate_synthetic,
    ingest_csv,
    write_csv,
    write_dataset_dir,
)
from .model import (
    FeatureExtractor,
    ModelConfig,
    ModelParams,
    SubNetwork,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .losses import (
    LossOutput,
    SampledLogitContext,
    adjust_logits,
    fedss_loss,
    fedss_loss_rewritten,
    full_softmax_loss,
    logit_adjustments,
    negonly_loss,
    posonly_loss,
    sampled_softmax_loss,
)
from .federation import (
    ClientDataset,
    ClientUpdate,
    FederationClient,
    FederationServer,
    ModelRequest,
    RoundConfig,
    RoundMetrics,
    ServerState,
    centralized_train,
    clients_from_partition,
    fedaws_spreadout_step,
    partition_clients,
    run_round,
    run_training,
    sample_negatives,
    spreadout_regularizer,
)
from .metrics import (
    NoiseCurvePoint,
    RetrievalIndex,
    collapse_score,
    client_confusion_matrix,
    comm_cost_report,
    embed,
    gradient_noise,
    map_at_r,
    noise_curve,
    top1_accuracy,
)
from .estimator import FederatedEmbeddingClassifier

__all__ = [
    "__version__",
    "ConfigurationError",
    "ContractViolationError",
    "DegenerateInputError",
    "IngestionError",
    "ProtocolViolationError",
    "Dataset",
    "SyntheticDatasetSpec",
    "generate_synthetic",
    "ingest_csv",
    "write_csv",
    "write_dataset_dir",
    "FeatureExtractor",
    "ModelConfig",
    "ModelParams",
    "SubNetwork",
    "init_model",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
    "LossOutput",
    "SampledLogitContext",
    "adjust_logits",
    "fedss_loss",
    "fedss_loss_rewritten",
    "full_softmax_loss",
    "logit_adjustments",
    "negonly_loss",
    "posonly_loss",
    "sampled_softmax_loss",
    "ClientDataset",
    "ClientUpdate",
    "FederationClient",
    "FederationServer",
    "ModelRequest",
    "RoundConfig",
    "RoundMetrics",
    "ServerState",
    "centralized_train",
    "clients_from_partition",
    "fedaws_spreadout_step",
    "partition_clients",
    "run_round",
    "run_training",
    "sample_negatives",
    "spreadout_regularizer",
    "NoiseCurvePoint",
    "RetrievalIndex",
    "collapse_score",
    "client_confusion_matrix",
    "comm_cost_report",
    "embed",
    "gradient_noise",
    "map_at_r",
    "noise_curve",
    "top1_accuracy",
    "FederatedEmbeddingClassifier",
]
