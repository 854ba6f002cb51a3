"""
Metrics on an imbalanced test split
===================================

With 100 positives and 3000 negatives, accuracy is almost entirely
specificity. Sensitivity, F1 and MCC tell a different story, and a
Wilson interval shows how uncertain a sensitivity over 100 images is.
"""

import numpy as np

from genfsl.evaluation import ConfusionMatrix, confidence_intervals, format_mean_std, metrics, threshold_sweep

cm = ConfusionMatrix(tp=90, fp=300, tn=2700, fn=10)
m = metrics(cm)
print(f"sensitivity {m.sensitivity:.3f}  specificity {m.specificity:.3f}  accuracy {m.accuracy:.3f}")
print(f"f1 {m.f1:.3f}  mcc {m.mcc:.4f}")

# accuracy is the count-weighted mix of the two rates
p, n = cm.positives, cm.negatives
print("recombined accuracy", (m.sensitivity * p + m.specificity * n) / (p + n))

for name, (lo, hi) in confidence_intervals(cm).items():
    print(f"95% Wilson interval for {name}: [{lo:.4f}, {hi:.4f}]")

# moving the threshold trades sensitivity for specificity
rng = np.random.default_rng(0)
labels = np.r_[np.ones(100, int), np.zeros(3000, int)]
scores = np.clip(rng.normal(np.where(labels == 1, 0.7, 0.35), 0.15), 0, 1)
for t, s in threshold_sweep(scores, labels)[6:15:2]:
    print(f"threshold {t:.2f}: sensitivity {s.sensitivity:.3f} specificity {s.specificity:.3f} mcc {s.mcc:.3f}")

# repeated experiments are summarised as mean and sample standard deviation
runs = np.array([0.8, 0.9, 1.0])
print("three runs:", format_mean_std(runs.mean(), runs.std(ddof=1)))
