"""
Autoencoder pretraining and few-shot fine-tuning of the classifier head.

Both loops are deterministic given ``TrainConfig.seed``: batch order for
epoch ``e`` comes from the stream ``(seed, e, 0)`` and the augmentation of
item ``i`` in epoch ``e`` from ``(seed, e, 1, i)``.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .dataio import AugmentationConfig, LabeledDataset, ShotSpec, augment, compute_sampler_weights, rng_for, weighted_sample
from .errors import ConfigError, DataError, DivergenceError, NonFiniteError
from .models import DEFAULT_CHANNELS, AutoencoderModel, ClassifierModel, build_autoencoder, parameter_digest

_VAL_STREAM = 0x5EED


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    weighted_sampling: bool = False
    shot_spec: ShotSpec | None = None
    val_fraction: float = 0.1
    # stop when loss improves by less than this fraction over ``early_stop_patience`` epochs
    early_stop_patience: int | None = None
    early_stop_min_improvement: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")

    @classmethod
    def finetune(cls, **overrides) -> "TrainConfig":
        """Fine-tuning defaults: 100 epochs, plateau stop, no augmentation, no validation split.

        Batch size 8 and learning rate 1e-4 suit 10 to 100 shots per class:
        larger steps on unnormalised encoder features switch off every
        hidden ReLU of the head within a few updates.
        """
        base = dict(
            epochs=100,
            batch_size=8,
            learning_rate=1e-4,
            augmentation=AugmentationConfig(enabled=False),
            val_fraction=0.0,
            early_stop_patience=10,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    # fraction of label-1 items in each optimiser batch
    batch_positive_fraction: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss), f"{r.seconds:.3f}"])


def epoch_batches(dataset: LabeledDataset, config: TrainConfig, epoch: int, weighted: bool = False) -> list[np.ndarray]:
    """Index arrays for one epoch, shuffled or class-weighted with replacement."""
    rng = rng_for(config.seed, epoch, 0)
    n = len(dataset)
    if weighted:
        order = weighted_sample(dataset, compute_sampler_weights(dataset), n, rng)
    else:
        order = rng.permutation(n)
    return [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]


def _augmented(images, idx, config, epoch):
    if not config.augmentation.enabled:
        return images[idx]
    return np.stack([augment(images[i], config.augmentation, rng_for(config.seed, epoch, 1, int(i))) for i in idx])


def split_validation(dataset: LabeledDataset, fraction: float, seed: int):
    """Seeded hold-out split; returns ``(train, val)`` with ``val`` possibly None."""
    n_val = int(len(dataset) * fraction)
    if n_val < 1 or n_val >= len(dataset):
        return dataset, None
    perm = rng_for(seed, _VAL_STREAM).permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def _plateaued(losses, config) -> bool:
    """True when the last ``k`` epochs failed to improve on the best earlier loss.

    Comparing best-so-far values keeps one noisy epoch from ending a run
    whose loss is still trending down.
    """
    k = config.early_stop_patience
    if k is None or len(losses) <= k:
        return False
    best_before = min(losses[:-k])
    return best_before - min(losses[-k:]) < config.early_stop_min_improvement * abs(best_before)


def _step(opt, params, grads, epoch, batch, names=None):
    try:
        opt.step(params, grads, names)
    except NonFiniteError as exc:
        raise DivergenceError(epoch, batch, str(exc)) from exc


def _guard(fn, epoch, batch):
    try:
        loss, *rest = fn()
    except NonFiniteError as exc:
        raise DivergenceError(epoch, batch, str(exc)) from exc
    if not np.isfinite(loss):
        raise DivergenceError(epoch, batch, loss)
    return (loss, *rest)


def pretrain_autoencoder(
    dataset: LabeledDataset,
    config: TrainConfig = TrainConfig(),
    channels=DEFAULT_CHANNELS,
    model: AutoencoderModel | None = None,
) -> tuple[AutoencoderModel, TrainLog]:
    """Train an autoencoder to reconstruct (augmented) images; labels are ignored."""
    if len(dataset) == 0:
        raise DataError("pretraining dataset is empty")
    train, val = split_validation(dataset, config.val_fraction, config.seed)
    if model is None:
        model = build_autoencoder(dataset.image_size, config.seed, channels)
    opt = T.Adam(lr=config.learning_rate)
    log = TrainLog()

    def step(x):
        recon, _, cache = model.forward_train(x)
        loss, grad = T.mse_loss(recon, x)
        return loss, model.backward(cache, grad)

    for epoch in range(config.epochs):
        start = time.perf_counter()
        total = 0.0
        for b, idx in enumerate(epoch_batches(train, config, epoch)):
            x = _augmented(train.images, idx, config, epoch)
            loss, grads = _guard(lambda: step(x), epoch, b)
            _step(opt, model.params, grads, epoch, b)
            total += loss * len(idx)
            log.step_losses.append(loss)
        val_loss = None
        if val is not None:
            val_total = 0.0
            for b in range(0, len(val), config.batch_size):
                x = val.images[b : b + config.batch_size]
                val_total += _guard(lambda: T.mse_loss(model.forward_train(x)[0], x), epoch, -1)[0] * len(x)
            val_loss = val_total / len(val)
        log.records.append(EpochRecord(epoch, total / len(train), val_loss, time.perf_counter() - start))
        if _plateaued(log.train_losses, config):
            log.stopped_early = True
            break
    return model, log


def finetune_classifier(
    model: ClassifierModel, dataset: LabeledDataset, config: TrainConfig = TrainConfig.finetune()
) -> tuple[ClassifierModel, TrainLog]:
    """Minimise BCE over the unfrozen layers of ``model`` (in place).

    Weighted batch loading is used when ``config.weighted_sampling`` is set
    or the shot spec is ``all_balanced``. Frozen parameters are verified
    bit-unchanged on exit.
    """
    if len(dataset) == 0:
        raise DataError("fine-tuning dataset is empty")
    spec = config.shot_spec
    if spec is not None and spec.mode == "k_shot":
        for c, n in dataset.class_counts.items():
            if n < spec.k:
                raise DataError(f"{spec.k}-shot fine-tuning needs {spec.k} items but class {dataset.class_names[c]!r} has {n}")
    weighted = config.weighted_sampling or (spec is not None and spec.balanced_loading)
    trainable = model.trainable()
    if not trainable:
        raise ConfigError("every layer is frozen; nothing to fine-tune")
    frozen_digest = parameter_digest({k: v for k, v in model.params.items() if k not in trainable})

    cached = None
    if model.encoder_frozen and not config.augmentation.enabled:
        cached = np.concatenate(
            [model.features(dataset.images[i : i + 256])[0] for i in range(0, len(dataset), 256)]
        )

    def step(idx, epoch):
        y = dataset.labels[idx]
        grads = {}
        if cached is not None:
            probs, head_cache = model.head_forward(cached[idx])
            loss, g = T.bce_loss(probs, y)
            model.head_backward(head_cache, g, grads)
        else:
            probs, cache = model.forward_train(_augmented(dataset.images, idx, config, epoch))
            loss, g = T.bce_loss(probs, y)
            grads = model.backward(cache, g)
        return loss, {k: grads[k] for k in trainable}

    opt = T.Adam(lr=config.learning_rate)
    log = TrainLog()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        total = 0.0
        for b, idx in enumerate(epoch_batches(dataset, config, epoch, weighted)):
            loss, grads = _guard(lambda: step(idx, epoch), epoch, b)
            _step(opt, model.params, grads, epoch, b, trainable)
            total += loss * len(idx)
            log.step_losses.append(loss)
            log.batch_positive_fraction.append(float(np.mean(dataset.labels[idx] == 1)))
        log.records.append(EpochRecord(epoch, total / len(dataset), None, time.perf_counter() - start))
        if _plateaued(log.train_losses, config):
            log.stopped_early = True
            break

    if parameter_digest({k: v for k, v in model.params.items() if k not in trainable}) != frozen_digest:
        raise AssertionError("frozen parameters changed during fine-tuning")
    return model, log


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    if config.shot_spec is not None:
        d["shot_spec"] = asdict(config.shot_spec)
    return d

