import logging
import math

import numpy as np
import pytest

from conftest import make_dataset
from dataset import inject_noise
from denoise import DetectionResult
from errors import ArgumentError, DegenerateError
from evaluation import (EvaluationReport, SweepRecord, aggregate_reports, evaluate, jaccard, jaccard_strict,
                        label_map, performance, psnr_accuracy_sweep, relabel_scores, removal_scores,
                        retained_accuracy, sweep_correlation, sweep_frame)
from model.model import build_architecture
from train import TrainingConfig


@pytest.fixture
def noised():
    """100 samples, 15 of them flipped."""
    dataset = make_dataset(n_per_class=50, num_classes=2, shape=(2, 2, 1))
    return inject_noise(dataset, 0.15, rng_seed=0)


def removing(dataset, removed):
    removed = np.sort(np.asarray(removed, dtype=np.int64))
    retained = dataset.take(np.flatnonzero(~np.isin(dataset.sample_index, removed)))
    return DetectionResult(per_class={}, removed=removed, retained=retained)


class TestJaccard:
    def test_identical(self):
        labels = {0: 1, 1: 0, 2: 2}
        assert jaccard(labels, labels) == 1.0
        assert jaccard_strict(labels, labels) == 1.0

    def test_fifteen_percent_noise(self, noised):
        dataset, _ = noised
        truth, labels = label_map(dataset, truth=True), label_map(dataset)
        assert jaccard(truth, labels) == pytest.approx(0.85)
        assert jaccard_strict(truth, labels) == pytest.approx(85 / 115)

    @pytest.mark.parametrize('seed', range(10))
    def test_direct_count(self, seed):
        rng = np.random.default_rng(seed)
        source = {int(i): int(l) for i, l in enumerate(rng.integers(0, 5, size=200))}
        kept = rng.choice(200, size=int(rng.integers(1, 201)), replace=False)
        candidate = {int(i): int(rng.integers(0, 5)) if rng.random() < 0.3 else source[int(i)] for i in kept}
        agree = 0
        for index in range(200):
            if index in candidate and candidate[index] == source[index]:
                agree += 1
        assert jaccard(source, candidate) == pytest.approx(agree / 200)
        assert jaccard_strict(source, candidate) == pytest.approx(agree / (200 + len(candidate) - agree))

    def test_nothing_agrees(self):
        assert jaccard({0: 0, 1: 0}, {0: 1, 1: 1}) == 0.0

    def test_candidate_outside_source(self):
        with pytest.raises(ArgumentError):
            jaccard({0: 1}, {1: 1})

    def test_empty(self):
        with pytest.raises(DegenerateError):
            jaccard({}, {})
        with pytest.raises(DegenerateError):
            jaccard_strict({}, {})


class TestPerformance:
    def test_difference(self):
        assert performance(0.9591, 0.85) == pytest.approx(0.1091)
        assert performance(0.85, 0.9591) == pytest.approx(-0.1091)

    def test_negative_is_reported(self, caplog):
        with caplog.at_level(logging.WARNING):
            performance(0.7, 0.8)
        assert 'P=' in caplog.text


class TestRetainedAccuracy:
    def test_nothing_removed(self, noised):
        dataset, _ = noised
        assert retained_accuracy(removing(dataset, [])) == pytest.approx(0.85)

    def test_all_flips_removed(self, noised):
        dataset, ledger = noised
        assert retained_accuracy(removing(dataset, sorted(ledger.flipped_indices))) == 1.0

    def test_truth_map(self, noised):
        dataset, _ = noised
        result = removing(dataset, [])
        assert retained_accuracy(result, label_map(dataset, truth=True)) == retained_accuracy(result)

    def test_everything_removed(self, noised):
        dataset, _ = noised
        with pytest.raises(DegenerateError):
            retained_accuracy(removing(dataset, dataset.sample_index))


class TestEvaluate:
    def test_report(self, noised):
        dataset, ledger = noised
        flipped = sorted(ledger.flipped_indices)
        clean = [i for i in range(100) if i not in ledger.flipped_indices]
        result = removing(dataset, flipped[:12] + clean[:4])
        report = evaluate(dataset, result, ledger, kl_formula='standard', config={'seed': 0, 'rate': 0.15})
        assert (report.n_samples, report.n_retained, report.n_removed) == (100, 84, 16)
        assert report.jaccard_noised == pytest.approx(0.85)
        assert report.jaccard_denoised == pytest.approx(81 / 84)
        assert report.performance == pytest.approx(81 / 84 - 0.85)
        assert report.retained_accuracy == pytest.approx(81 / 84)
        assert report.removal_precision == pytest.approx(0.75)
        assert report.removal_recall == pytest.approx(0.8)
        assert report.noise_rate == 0.15
        assert report.config == {'seed': '0', 'rate': '0.15'}

    def test_removal_scores_without_removals(self, noised):
        dataset, ledger = noised
        assert removal_scores(dataset, np.zeros(0, dtype=np.int64), ledger) == (0.0, 0.0)

    def test_relabel_scores(self, noised):
        dataset, _ = noised
        scores = relabel_scores(dataset.with_labels(dataset.true_labels), dataset)
        assert scores == {'accuracy': 1.0, 'agreement_with_input': 0.85, 'changed': 15}

    def test_save_and_load(self, tmp_path, noised):
        dataset, ledger = noised
        report = evaluate(dataset, removing(dataset, [1, 2, 3]), ledger, mean_psnr=31.25,
                          config={'seed': 4}, baselines={'knn': {'accuracy': 0.9, 'changed': 3}})
        path = tmp_path / 'report.txt'
        report.save(str(path))
        assert 'baseline.knn.accuracy=0.9' in path.read_text().splitlines()
        assert EvaluationReport.load(str(path)) == report


class TestAggregate:
    def test_mean_and_range(self, noised):
        dataset, ledger = noised
        reports = [evaluate(dataset, removing(dataset, []), ledger) for _ in range(2)]
        reports[0].jaccard_denoised, reports[1].jaccard_denoised = 0.9, 0.8
        summary = aggregate_reports(reports)
        row = summary.loc['jaccard_denoised']
        assert row['mean'] == pytest.approx(0.85)
        assert (row['min'], row['max'], row['runs']) == (0.8, 0.9, 2)
        assert 'mean_psnr' not in summary.index

    def test_nothing_to_aggregate(self):
        with pytest.raises(ArgumentError):
            aggregate_reports([])


class TestSweep:
    def test_correlation(self):
        records = [SweepRecord(e, p, a) for e, p, a in [(1, 20.0, 0.86), (2, 25.0, 0.9), (3, 22.0, 0.88)]]
        assert sweep_correlation(records) == pytest.approx(1.0)
        assert math.isnan(sweep_correlation(records[:1]))
        assert math.isnan(sweep_correlation([SweepRecord(1, 20.0, 0.9), SweepRecord(2, 21.0, 0.9)]))

    def test_budgets_must_ascend(self):
        dataset = make_dataset(n_per_class=12, num_classes=2)
        arch = build_architecture((8, 8, 1), latent_dim=4)
        with pytest.raises(ArgumentError):
            psnr_accuracy_sweep(dataset, arch, [2, 2], TrainingConfig(progress_bar=False))

    def test_small_sweep(self):
        dataset, _ = inject_noise(make_dataset(n_per_class=12, num_classes=2), 0.1, rng_seed=0)
        arch = build_architecture((8, 8, 1), latent_dim=4)
        cfg = TrainingConfig(batch_size=8, progress_bar=False)
        records = psnr_accuracy_sweep(dataset, arch, [1, 2], cfg)
        assert [r.epochs for r in records] == [1, 2]
        for record in records:
            assert math.isfinite(record.mean_psnr)
            assert 0.0 <= record.retained_accuracy <= 1.0
        assert list(sweep_frame(records).columns) == ['epochs', 'mean_psnr', 'retained_accuracy', 'removed']
