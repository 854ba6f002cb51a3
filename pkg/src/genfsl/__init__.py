"""Generative few-shot transfer learning on numpy.

Pretrain a convolutional autoencoder on an unlabelled source corpus, move
its encoder into a binary classifier, fine-tune only the fully connected
head on a handful of target images, and evaluate with metrics suited to
imbalanced test sets.
"""
from .dataio import (
    AugmentationConfig,
    LabeledDataset,
    ShotSpec,
    compute_sampler_weights,
    generate_synthetic_dataset,
    load_split,
    select_few_shot,
    synthetic_dataset,
    weighted_sample,
)
from .evaluation import (
    ConfusionMatrix,
    ExperimentReport,
    MetricSet,
    balanced_test_view,
    binarize,
    confusion,
    metrics,
    run_repeated_experiment,
    threshold_sweep,
    wilson_interval,
)
from .models import (
    build_autoencoder,
    build_classifier_from_encoder,
    classifier_forward,
    classifier_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, TrainLog, finetune_classifier, pretrain_autoencoder

__version__ = "0.1.0"
