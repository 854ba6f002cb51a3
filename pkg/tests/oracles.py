"""Independent metric oracle shared by the evaluation and acceptance tests."""
import math
from fractions import Fraction


def nearest_float_sqrt(q: Fraction) -> float:
    """The binary64 value nearest to sqrt(q), decided with exact rational arithmetic."""
    c = math.sqrt(float(q))
    while True:
        lo, hi = math.nextafter(c, 0.0), math.nextafter(c, math.inf)
        if c > 0 and q < ((Fraction(lo) + Fraction(c)) / 2) ** 2:
            c = lo
        elif q > ((Fraction(c) + Fraction(hi)) / 2) ** 2:
            c = hi
        else:
            return c


def recount(preds, labels):
    tp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
    tn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 0)
    fn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 1)
    return tp, fp, tn, fn


def reference_metrics(tp, fp, tn, fn):
    """Definitions evaluated in exact rationals, rounded once; zero denominators give 0."""

    def r(a, b):
        return float(Fraction(a, b)) if b else 0.0

    num = tp * tn - fp * fn
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = math.copysign(nearest_float_sqrt(Fraction(num * num, den)), num) if den else 0.0
    return {
        "sensitivity": r(tp, tp + fn),
        "specificity": r(tn, tn + fp),
        "f1": r(2 * tp, 2 * tp + fp + fn),
        "accuracy": r(tp + tn, tp + fp + tn + fn),
        "mcc": mcc + 0.0,
    }
