"""Support-set selection for source-free few-shot domain adaptation.

A self-contained numpy implementation of a selection-then-adapt pipeline:
self-supervised feature adaptation on the unlabeled target domain, ensemble
pseudo-labeling, per-class K-means selection of a small support set, and
batch-norm statistics adaptation, benchmarked against random, entropy, and
MC-dropout selection on synthetic domain-shift tasks.
"""

from . import adapt, baselines, byol, domains, harness, nncore, pseudolabel, selection
from .adapt import (
    AdaptedModel,
    CentroidClassifier,
    LccsState,
    SourceModel,
    build_adapted_model,
    build_centroid_classifier,
    compute_support_bn_stats,
    evaluate,
    lccs_adapt,
)
from .baselines import (
    entropy_select,
    mc_dropout_select,
    random_balanced_select,
    shannon_entropy,
)
from .byol import AugmentSpec, ByolConfig, augment, byol_loss, train_byol
from .domains import (
    DomainSpec,
    LabeledDataset,
    ShiftSpec,
    UnlabeledDataset,
    annotate,
    generate_pair,
    load_dataset,
    save_dataset,
)
from .harness import (
    ExperimentConfig,
    RunReport,
    config_from_file,
    config_to_file,
    default_config,
    load_checkpoint,
    run_comparison,
    run_pipeline,
    save_checkpoint,
    train_source,
)
from .pseudolabel import (
    PseudoLabelTable,
    ensemble_pseudo_labels,
    pseudo_label_accuracy,
    single_backbone_pseudo_labels,
)
from .selection import (
    SupportSet,
    class_balanced_select,
    cluster_select,
    euclidean_distance,
    kmeans,
    load_manifest,
    project_features,
    save_manifest,
    select_support,
)

__version__ = "0.1.0"
