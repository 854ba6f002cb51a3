"""
Few-shot transfer on synthetic images
=====================================

Pretrain an autoencoder on 500 unlabelled synthetic images, then train
only a small classification head on 20 images per class. The same head
trained on top of an untrained encoder gives the baseline.
Runs in about a minute on one CPU core.
"""

import numpy as np

from genfsl import (
    ShotSpec,
    TrainConfig,
    binarize,
    build_autoencoder,
    build_classifier_from_encoder,
    classifier_forward,
    finetune_classifier,
    pretrain_autoencoder,
    select_few_shot,
    synthetic_dataset,
)

# source corpus: labels exist but pretraining ignores them
source = synthetic_dataset(250, 64, seed=1)
ae, log = pretrain_autoencoder(source, TrainConfig(epochs=20, seed=0))
print("reconstruction MSE per epoch")
print(np.round(log.train_losses, 4))

# target pool and a balanced 200-image test split, disjoint seeds
pool = synthetic_dataset(100, 64, seed=2)
test = synthetic_dataset(100, 64, seed=3)
untrained = build_autoencoder(64, seed=0)

for name, encoder in (("pretrained", ae.params), ("untrained", untrained.params)):
    accuracies = []
    for seed in range(5):
        shots = select_few_shot(pool, ShotSpec("k_shot", 20, seed=seed))
        clf = build_classifier_from_encoder(encoder, 64, seed=seed)
        finetune_classifier(clf, shots, TrainConfig.finetune(seed=seed))
        accuracies.append(np.mean(binarize(classifier_forward(clf, test.images)) == test.labels))
    print(f"{name:<11} encoder: mean accuracy {np.mean(accuracies):.3f}  {np.round(accuracies, 3)}")
