import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genfsl import evaluation as E
from genfsl.dataio import LabeledDataset, ShotSpec, synthetic_dataset
from genfsl.errors import DataError
from genfsl.models import build_autoencoder
from genfsl.training import TrainConfig
from oracles import recount as brute_force
from oracles import reference_metrics


def random_cases(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        size = int(rng.integers(1, 60))
        kind = i % 5
        if kind == 0:
            labels = np.ones(size, int)
        elif kind == 1:
            labels = np.zeros(size, int)
        else:
            labels = rng.integers(0, 2, size)
        if i % 7 == 0:
            preds = np.full(size, i % 2)
        else:
            preds = rng.integers(0, 2, size)
        yield preds, labels


class TestBinarize:
    def test_boundary_positive(self):
        assert E.binarize([0.2, 0.5, 0.9], 0.5).tolist() == [0, 1, 1]

    def test_degenerate_thresholds(self):
        s = np.random.default_rng(0).uniform(size=50)
        assert E.binarize(s, 0.0).all()
        assert not E.binarize(s, np.nextafter(1.0, 2.0)).any()

    def test_default_is_half(self):
        assert E.DEFAULT_THRESHOLD == 0.5
        assert E.binarize([0.4999, 0.5]).tolist() == [0, 1]


class TestConfusion:
    def test_perfect(self):
        assert E.confusion([1, 1, 0, 0], [1, 1, 0, 0]) == E.ConfusionMatrix(2, 0, 2, 0)

    def test_all_positive(self):
        cm = E.confusion([1, 1], [1, 0])
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (1, 1, 0, 0)

    def test_brute_force(self):
        for preds, labels in random_cases():
            cm = E.confusion(preds, labels)
            assert (cm.tp, cm.fp, cm.tn, cm.fn) == brute_force(preds, labels)
            assert cm.positives == int(labels.sum())

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            E.confusion([1, 0], [1])

    def test_non_binary(self):
        with pytest.raises(DataError):
            E.confusion([2], [1])


class TestMetrics:
    def test_matches_reference_exactly(self):
        for preds, labels in random_cases(seed=1):
            cm = E.confusion(preds, labels)
            m = E.metrics(cm)
            ref = reference_metrics(*brute_force(preds, labels))
            for name, value in ref.items():
                assert getattr(m, name) == value, (name, cm)

    def test_sensitivity_87(self):
        assert E.metrics(E.ConfusionMatrix(87, 5, 40, 13)).sensitivity == 0.87

    def test_mcc_symmetric_zero(self):
        assert E.metrics(E.ConfusionMatrix(25, 25, 25, 25)).mcc == 0.0

    def test_mcc_spot_value(self):
        m = E.metrics(E.ConfusionMatrix(tp=90, fp=300, tn=2700, fn=10))
        expected = (90 * 2700 - 300 * 10) / math.sqrt(390 * 100 * 3000 * 2710)
        assert m.mcc == pytest.approx(expected, abs=1e-12)
        assert m.mcc == pytest.approx(0.4262, abs=1e-3)

    def test_zero_denominators_flagged(self):
        m = E.metrics(E.ConfusionMatrix(0, 0, 5, 0))
        assert m.sensitivity == 0 and m.f1 == 0 and m.mcc == 0
        assert set(m.undefined) == {"sensitivity", "f1", "mcc"}
        assert m.specificity == 1 and m.accuracy == 1

    def test_empty_is_error(self):
        with pytest.raises(DataError):
            E.metrics(E.ConfusionMatrix(0, 0, 0, 0))

    def test_accuracy_identity(self):
        for preds, labels in random_cases(200, seed=2):
            cm = E.confusion(preds, labels)
            m = E.metrics(cm)
            p, n = cm.positives, cm.negatives
            # exact in rationals; compare the recombined counts
            assert round(m.sensitivity * p + m.specificity * n) == cm.tp + cm.tn
            assert m.accuracy == pytest.approx((m.sensitivity * p + m.specificity * n) / (p + n), abs=1e-15)

    @given(st.tuples(*[st.integers(0, 500)] * 4).filter(lambda c: sum(c) > 0))
    @settings(max_examples=300, deadline=None)
    def test_mcc_swap_invariance_and_range(self, counts):
        tp, fp, tn, fn = counts
        a = E.metrics(E.ConfusionMatrix(tp, fp, tn, fn))
        b = E.metrics(E.ConfusionMatrix(tn, fn, tp, fp))
        assert a.mcc == b.mcc
        assert -1 <= a.mcc <= 1
        for name in ("sensitivity", "specificity", "f1", "accuracy"):
            assert 0 <= getattr(a, name) <= 1


class TestSweep:
    def test_default_grid(self):
        g = E.default_grid()
        assert len(g) == 21 and g[0] == 0 and g[-1] == 1 and g[10] == 0.5

    def test_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            scores = rng.uniform(size=n)
            labels = rng.integers(0, 2, n)
            sweep = E.threshold_sweep(scores, labels)
            sens = [m.sensitivity for _, m in sweep]
            spec = [m.specificity for _, m in sweep]
            assert all(a >= b for a, b in zip(sens, sens[1:]))
            assert all(a <= b for a, b in zip(spec, spec[1:]))

    def test_separable(self):
        scores = [0.1, 0.2, 0.3, 0.7, 0.8]
        labels = [0, 0, 0, 1, 1]
        assert any(m.sensitivity == 1 and m.specificity == 1 for _, m in E.threshold_sweep(scores, labels))


class TestWilson:
    def test_reference_value(self):
        # hand evaluation: z = 1.959964, centre = (0.9 + z^2/200) / (1 + z^2/100)
        z = 1.959963984540054
        n, p = 100, 0.9
        centre = (p + z * z / (2 * n)) / (1 + z * z / n)
        half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
        low, high = E.wilson_interval(90, 100, 0.95)
        assert low == pytest.approx(centre - half, abs=1e-12)
        assert high == pytest.approx(centre + half, abs=1e-12)
        assert (round(low, 4), round(high, 4)) == (0.8256, 0.9448)

    def test_boundaries(self):
        assert E.wilson_interval(0, 17)[0] == 0
        assert E.wilson_interval(17, 17)[1] == 1

    def test_contains_estimate(self):
        for k in range(0, 31):
            lo, hi = E.wilson_interval(k, 30, 0.9)
            assert lo <= k / 30 <= hi

    @pytest.mark.parametrize("args", [(1, 0), (5, 4), (-1, 4)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            E.wilson_interval(*args)


def _toy_dataset(n0, n1, size=8):
    labels = np.array([0] * n0 + [1] * n1)
    images = np.zeros((n0 + n1, 1, size, size), np.float32)
    images[:, 0, 0, 0] = np.arange(n0 + n1)
    paths = [f"x/{i:05d}.pgm" for i in range(n0 + n1)]
    return LabeledDataset(images, labels, ("neg", "pos"), paths)


class TestBalancedView:
    def test_table_counts(self):
        view = E.balanced_test_view(_toy_dataset(3000, 100), seed=4)
        assert view.class_counts == {0: 100, 1: 100}
        # without replacement
        assert len(set(view.paths)) == 200

    def test_identity_when_balanced(self):
        ds = _toy_dataset(20, 20)
        view = E.balanced_test_view(ds, 0)
        assert view.paths == ds.paths and view.images.tobytes() == ds.images.tobytes()

    def test_deterministic(self):
        ds = _toy_dataset(50, 7)
        assert E.balanced_test_view(ds, 1).paths == E.balanced_test_view(ds, 1).paths
        assert E.balanced_test_view(ds, 1).paths != E.balanced_test_view(ds, 2).paths

    def test_missing_class(self):
        with pytest.raises(DataError):
            E.balanced_test_view(_toy_dataset(5, 0), 0)


class TestReport:
    def _report(self, values):
        runs = []
        for i, v in enumerate(values):
            m = E.MetricSet(v, 0.5, 0.5, 0.5, 0.1, 0.5)
            runs.append(E.RunResult(i, i, E.ConfusionMatrix(1, 1, 1, 1), m, {}))
        return E.ExperimentReport(runs, ShotSpec("k_shot", 20), 0.5)

    def test_three_point(self):
        r = self._report([0.8, 0.9, 1.0])
        assert r.mean("sensitivity") == pytest.approx(0.9, abs=1e-15)
        assert r.std("sensitivity") == pytest.approx(0.1, abs=1e-15)
        assert r.summary("sensitivity") == "90.00%±10.00%"

    def test_two_decimal_percent_style(self):
        assert E.format_mean_std(0.87, 0.0856) == "87.00%±8.56%"

    def test_single_run(self):
        r = self._report([0.7])
        assert r.single_run and r.std("sensitivity") == 0
        assert r.to_dict()["single_run"] is True

    def test_seed_derivation(self):
        assert E.run_seed(0, 1) == E.run_seed(0, 1)
        assert len({E.run_seed(0, i) for i in range(10)}) == 10
        assert E.run_seed(0, 0) != E.run_seed(1, 0)


class TestRepeatedExperiment:
    @pytest.fixture(scope="class")
    @staticmethod
    def outcome():
        pool = synthetic_dataset(8, 16, 1)
        test = synthetic_dataset(6, 16, 2)
        enc = build_autoencoder(16, seed=0).params
        cfg = TrainConfig.finetune(epochs=5)
        seen = []
        report = E.run_repeated_experiment(
            pool, test, enc, ShotSpec("k_shot", 3), 4, cfg, base_seed=7,
            on_run=lambda res, model, log: seen.append((res.index, len(log.records))),
        )
        return report, seen

    def test_runs_and_seeds(self, outcome):
        report, seen = outcome
        assert [r.index for r in report.runs] == [0, 1, 2, 3] == [i for i, _ in seen]
        assert report.seeds == [E.run_seed(7, i) for i in range(4)]

    def test_aggregates_recompute(self, outcome, tmp_path):
        report, _ = outcome
        report.write_csv(tmp_path / "runs.csv")
        report.write_json(tmp_path / "report.json")
        with open(tmp_path / "runs.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["seed", "threshold", "sensitivity", "specificity", "f1", "accuracy", "mcc"]
        assert len(rows) == 4
        agg = json.loads((tmp_path / "report.json").read_text())["aggregate"]
        for name in E.METRIC_NAMES:
            col = np.array([float(r[name]) for r in rows])
            assert abs(col.mean() - agg[name]["mean"]) <= 1e-9
            assert abs(col.std(ddof=1) - agg[name]["std"]) <= 1e-9

    def test_reproducible(self, outcome):
        report, _ = outcome
        again = E.run_repeated_experiment(
            synthetic_dataset(8, 16, 1), synthetic_dataset(6, 16, 2), build_autoencoder(16, seed=0).params,
            ShotSpec("k_shot", 3), 4, TrainConfig.finetune(epochs=5), base_seed=7,
        )
        assert [r.metrics for r in again.runs] == [r.metrics for r in report.runs]

    def test_failure_names_run(self):
        pool = synthetic_dataset(2, 16, 1)
        with pytest.raises(E.RunFailedError) as err:
            E.run_repeated_experiment(
                pool, pool, build_autoencoder(16).params, ShotSpec("k_shot", 5), 2, TrainConfig.finetune(epochs=1)
            )
        assert err.value.index == 0
        assert "'clear'" in str(err.value)
