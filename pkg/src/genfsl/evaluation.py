"""
Metrics for imbalanced binary classification and the repeated-subset protocol.

The positive class is label 1 (the minority class in the target data).
All scalar metrics derive from integer confusion counts; a metric whose
denominator is zero is reported as 0 and listed in ``MetricSet.undefined``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal, localcontext
from statistics import NormalDist

import numpy as np

from .dataio import LabeledDataset, ShotSpec, rng_for, select_few_shot
from .errors import DataError, GenFSLError
from .models import build_classifier_from_encoder, classifier_forward

DEFAULT_THRESHOLD = 0.5
METRIC_NAMES = ("sensitivity", "specificity", "f1", "accuracy", "mcc")
_BALANCE_STREAM = 0xBA1


def default_grid() -> np.ndarray:
    """Thresholds 0.00, 0.05, ..., 1.00."""
    return np.round(np.arange(21) * 0.05, 10)


def binarize(scores, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Predict 1 iff score >= threshold."""
    return (np.asarray(scores, dtype=np.float64) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


def confusion(predictions, labels) -> ConfusionMatrix:
    p = np.asarray(predictions).astype(np.int64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if p.shape != y.shape:
        raise DataError(f"{p.size} predictions for {y.size} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise DataError("predictions and labels must be 0 or 1")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


@dataclass(frozen=True)
class MetricSet:
    sensitivity: float
    specificity: float
    f1: float
    accuracy: float
    mcc: float
    threshold: float
    # metrics whose denominator was zero and were reported as 0
    undefined: tuple = ()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def _ratio(num: int, den: int, name: str, undefined: list) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def _correctly_rounded_mcc(num: int, den: int) -> float:
    # num / sqrt(den) in binary64 rounds twice; 50 digits then one rounding to float does not
    with localcontext() as ctx:
        ctx.prec = 50
        return float(Decimal(num) / Decimal(den).sqrt())


def metrics(cm: ConfusionMatrix, threshold: float = DEFAULT_THRESHOLD) -> MetricSet:
    if cm.total == 0:
        raise DataError("cannot compute metrics of an empty evaluation")
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    undefined: list[str] = []
    sens = _ratio(tp, tp + fn, "sensitivity", undefined)
    spec = _ratio(tn, tn + fp, "specificity", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    acc = (tp + tn) / cm.total
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        undefined.append("mcc")
        mcc = 0.0
    else:
        mcc = _correctly_rounded_mcc(tp * tn - fp * fn, den)
    return MetricSet(sens, spec, f1, acc, mcc, float(threshold), tuple(undefined))


def evaluate_scores(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> tuple[ConfusionMatrix, MetricSet]:
    cm = confusion(binarize(scores, threshold), labels)
    return cm, metrics(cm, threshold)


def threshold_sweep(scores, labels, grid=None) -> list[tuple[float, MetricSet]]:
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    return [(float(t), evaluate_scores(scores, labels, float(t))[1]) for t in grid]


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / trials
    z2n = z * z / trials
    centre = (p + z2n / 2) / (1 + z2n)
    half = z * math.sqrt(p * (1 - p) / trials + z2n / (4 * trials)) / (1 + z2n)
    low = 0.0 if successes == 0 else max(0.0, centre - half)
    high = 1.0 if successes == trials else min(1.0, centre + half)
    return low, high


def confidence_intervals(cm: ConfusionMatrix, confidence: float = 0.95) -> dict:
    """Wilson intervals for the proportion-type metrics that have trials."""
    out = {}
    for name, k, n in (
        ("sensitivity", cm.tp, cm.positives),
        ("specificity", cm.tn, cm.negatives),
        ("accuracy", cm.tp + cm.tn, cm.total),
    ):
        if n > 0:
            out[name] = wilson_interval(k, n, confidence)
    return out


def balanced_test_view(test: LabeledDataset, seed: int = 0) -> LabeledDataset:
    """Subsample the majority class without replacement down to the minority count."""
    counts = test.class_counts
    if min(counts.values()) == 0:
        raise DataError("balanced view needs both classes present")
    n = min(counts.values())
    keep = []
    for c in (0, 1):
        idx = np.flatnonzero(test.labels == c)
        if len(idx) > n:
            idx = np.sort(rng_for(seed, _BALANCE_STREAM, c).choice(idx, size=n, replace=False))
        keep.append(idx)
    return test.subset(np.sort(np.concatenate(keep)))


def format_mean_std(mean: float, std: float) -> str:
    """Render a proportion pair as e.g. ``"90.00%±10.00%"``."""
    return f"{100 * mean:.2f}%±{100 * std:.2f}%"


@dataclass
class RunResult:
    index: int
    seed: int
    confusion: ConfusionMatrix
    metrics: MetricSet
    intervals: dict


@dataclass
class ExperimentReport:
    runs: list
    shot_spec: ShotSpec
    threshold: float
    confidence: float = 0.95
    extra: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    @property
    def single_run(self) -> bool:
        return len(self.runs) == 1

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(r.metrics, name) for r in self.runs], dtype=np.float64)

    def mean(self, name: str) -> float:
        return float(np.mean(self.values(name)))

    def std(self, name: str) -> float:
        """Sample (n-1) standard deviation; 0 for a single run."""
        v = self.values(name)
        return 0.0 if len(v) < 2 else float(np.std(v, ddof=1))

    def summary(self, name: str) -> str:
        return format_mean_std(self.mean(name), self.std(name))

    def summary_line(self) -> str:
        parts = [f"{n} {self.summary(n)}" for n in METRIC_NAMES]
        return f"{len(self.runs)} runs, {self.shot_spec.label()}: " + ", ".join(parts)

    def to_dict(self) -> dict:
        return {
            "shot_spec": asdict(self.shot_spec),
            "threshold": self.threshold,
            "confidence": self.confidence,
            "single_run": self.single_run,
            "seeds": self.seeds,
            "runs": [
                {
                    "index": r.index,
                    "seed": r.seed,
                    "confusion": asdict(r.confusion),
                    "metrics": r.metrics.as_dict(),
                    "intervals": {k: list(v) for k, v in r.intervals.items()},
                }
                for r in self.runs
            ],
            "aggregate": {
                n: {"mean": self.mean(n), "std": self.std(n), "summary": self.summary(n)} for n in METRIC_NAMES
            },
            **self.extra,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path) -> None:
        write_metric_rows(path, [(r.seed, r.metrics) for r in self.runs])


def write_metric_rows(path, rows) -> None:
    """CSV with columns seed, threshold, sensitivity, specificity, f1, accuracy, mcc."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "threshold", *METRIC_NAMES])
        for seed, m in rows:
            w.writerow([seed, repr(m.threshold), *(repr(getattr(m, n)) for n in METRIC_NAMES)])


def run_seed(base_seed: int, index: int) -> int:
    """Seed for run ``index``, derived from ``(base_seed, index)``."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


class RunFailedError(GenFSLError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"run {index} failed: {cause}")


def run_repeated_experiment(
    train_pool: LabeledDataset,
    test: LabeledDataset,
    encoder,
    shot_spec: ShotSpec,
    repeats: int,
    finetune_config,
    base_seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    fc_width: int = 128,
    balanced_test: bool = False,
    confidence: float = 0.95,
    on_run=None,
) -> ExperimentReport:
    """Fine-tune ``repeats`` fresh classifiers on independently drawn shot subsets.

    Run ``i`` uses ``seed_i = run_seed(base_seed, i)`` for the subset, the
    head initialisation and batch order. Every run starts from the same
    ``encoder`` parameters. ``on_run(result, model, log)`` is called after
    each run, e.g. to write per-run artifacts.
    """
    from dataclasses import replace

    from .training import finetune_classifier

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    view = balanced_test_view(test, base_seed) if balanced_test else test
    runs = []
    for i in range(repeats):
        seed = run_seed(base_seed, i)
        try:
            spec = replace(shot_spec, seed=seed)
            subset = select_few_shot(train_pool, spec)
            model = build_classifier_from_encoder(encoder, train_pool.image_size, seed=seed, fc_width=fc_width)
            model, log = finetune_classifier(model, subset, replace(finetune_config, seed=seed, shot_spec=spec))
            cm, m = evaluate_scores(classifier_forward(model, view.images), view.labels, threshold)
        except GenFSLError as exc:
            raise RunFailedError(i, exc) from exc
        result = RunResult(i, seed, cm, m, confidence_intervals(cm, confidence))
        runs.append(result)
        if on_run is not None:
            on_run(result, model, log)
    return ExperimentReport(runs, shot_spec, float(threshold), confidence)
