"""Aggregative self-supervised learning at desk scale.

Greedy multi-task aggregation of proxy tasks driven by linear CKA
similarity, and self-aggregation via a differentiable complement loss
against a frozen reference representation.
"""

from .cka import (
    FeatureMatrix,
    SimilarityMatrix,
    center_gram,
    gram,
    lcka,
    lcka_feature_form,
    lcka_loss,
    similarity_matrix,
)
from .data import ProxyTaskSpec, SyntheticDataset, generate_dataset, ntxent_loss, standard_task_pool
from .nn import Head, MlpBackbone, load_checkpoint, parameter_hash, save_checkpoint
from .tensor import Adam, Tensor, backward, l2_normalize_rows, matmul, mse_loss, relu, softmax_cross_entropy
from .trainer import (
    TrainedModel,
    TrainerConfig,
    evaluate_acc,
    extract_features,
    finetune_target,
    pretrain_proxy,
    train_multitask,
    train_self_aggregative,
)
from .aggregator import (
    AggregationState,
    IterationRecord,
    initial_ranking,
    replay_selection,
    run_mt_assl,
    select_next,
)

__version__ = "0.1.0"
