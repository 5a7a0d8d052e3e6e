"""
-----------------------------------------------------------------------------------
Description: Jaccard scores, performance P, retained accuracy, PSNR vs accuracy
             sweep and the evaluation report
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from sklearn.metrics import precision_score, recall_score

from dataset import LabeledDataset, NoiseLedger
from denoise import DetectionResult, detect_and_remove
from errors import ArgumentError, DegenerateError, TrainingDivergedError
from model.model import CaeArchitecture, project
from train import TrainingConfig, train
from utils import format_value, read_key_values, write_key_values


def label_map(dataset: LabeledDataset, truth=False) -> dict:
    labels = dataset.true_labels if truth else dataset.labels
    return {int(i): int(l) for i, l in zip(dataset.sample_index, labels)}


def jaccard(source, candidate) -> float:
    """
    Samples are indices: the intersection counts candidate samples whose label
    agrees with the source, the union is every index present in either map.
    """
    extra = set(candidate) - set(source)
    if extra:
        raise ArgumentError(f'candidate holds {len(extra)} index(es) outside the source, e.g. {min(extra)}')
    union = len(set(source) | set(candidate))
    if union == 0:
        raise DegenerateError('jaccard of two empty label maps')
    intersection = sum(1 for index, label in candidate.items() if source[index] == label)
    return intersection / union


def jaccard_strict(source, candidate) -> float:
    """Same score over (index, label) pairs."""
    source_pairs = set(source.items())
    candidate_pairs = set(candidate.items())
    union = len(source_pairs | candidate_pairs)
    if union == 0:
        raise DegenerateError('jaccard of two empty label maps')
    return len(source_pairs & candidate_pairs) / union


def performance(j_denoised, j_noised) -> float:
    p = j_denoised - j_noised
    if p < 0:
        logging.warning(f'performance P={round(p, 4)} < 0: the result holds more noise than its input')
    return p


def retained_accuracy(result: DetectionResult, truth=None) -> float:
    """Share of retained samples whose current label equals the true one."""
    retained = result.retained
    if len(retained) == 0:
        raise DegenerateError('no sample retained, accuracy undefined')
    if truth is None:
        true_labels = retained.true_labels
    else:
        true_labels = np.array([truth[int(i)] for i in retained.sample_index], dtype=np.int64)
    return float(np.mean(retained.labels == true_labels))


def removal_scores(dataset: LabeledDataset, removed, ledger: NoiseLedger):
    flipped = ledger.flipped_mask(dataset.sample_index)
    predicted = np.isin(dataset.sample_index, removed)
    precision = precision_score(flipped, predicted, zero_division=0)
    recall = recall_score(flipped, predicted, zero_division=0)
    return float(precision), float(recall)


def relabel_scores(relabeled: LabeledDataset, noisy: LabeledDataset) -> dict:
    """Baseline accuracy against the truth and agreement with the noisy input."""
    return {
        'accuracy': float(np.mean(relabeled.labels == relabeled.true_labels)),
        'agreement_with_input': float(np.mean(relabeled.labels == noisy.labels)),
        'changed': int(np.sum(relabeled.labels != noisy.labels)),
    }


# ================================ report ================================

@dataclass
class EvaluationReport:
    dataset: str
    n_samples: int
    n_retained: int
    jaccard_noised: float
    jaccard_denoised: float
    jaccard_strict_noised: float
    jaccard_strict_denoised: float
    performance: float
    retained_accuracy: float
    noise_rate: float = None
    removal_precision: float = None
    removal_recall: float = None
    mean_psnr: float = None
    kl_formula: str = None
    eps_mode: str = None
    removed_per_class: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_removed(self):
        return self.n_samples - self.n_retained

    def items(self):
        for f in dataclasses.fields(self):
            if f.name in ('removed_per_class', 'baselines', 'config'):
                continue
            yield f.name, getattr(self, f.name)
        for label, count in sorted(self.removed_per_class.items()):
            yield f'removed_class.{label}', count
        for name, scores in sorted(self.baselines.items()):
            for metric, value in sorted(scores.items()):
                yield f'baseline.{name}.{metric}', value
        for key, value in sorted(self.config.items()):
            yield f'config.{key}', value

    def save(self, path):
        write_key_values(path, self.items())

    @classmethod
    def load(cls, path) -> 'EvaluationReport':
        return cls.from_values(read_key_values(path))

    @classmethod
    def from_values(cls, values) -> 'EvaluationReport':
        kwargs = {'removed_per_class': {}, 'baselines': {}, 'config': {}}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, text in values.items():
            if key.startswith('removed_class.'):
                kwargs['removed_per_class'][int(key.split('.', 1)[1])] = int(text)
            elif key.startswith('baseline.'):
                _, name, metric = key.split('.', 2)
                kwargs['baselines'].setdefault(name, {})[metric] = int(text) if metric == 'changed' else float(text)
            elif key.startswith('config.'):
                kwargs['config'][key.split('.', 1)[1]] = text
            elif key in types:
                kwargs[key] = _parse(text, types[key])
        return cls(**kwargs)


def _parse(text, kind):
    if text == '':
        return None
    if kind in (int, 'int'):
        return int(text)
    if kind in (float, 'float'):
        return float(text)
    return text


def evaluate(dataset: LabeledDataset, result: DetectionResult, ledger: NoiseLedger = None,
             mean_psnr=None, kl_formula=None, config=None, baselines=None) -> EvaluationReport:
    """
    `dataset` carries the noised labels and the true ones. Each Jaccard score
    compares a candidate with the ground truth of the samples it holds.
    """
    truth = label_map(dataset, truth=True)
    noised = label_map(dataset)
    retained_truth = label_map(result.retained, truth=True)
    denoised = label_map(result.retained)

    j_noised = jaccard(truth, noised)
    j_denoised = jaccard(retained_truth, denoised)
    report = EvaluationReport(
        dataset=dataset.name,
        n_samples=len(dataset),
        n_retained=len(result.retained),
        jaccard_noised=j_noised,
        jaccard_denoised=j_denoised,
        jaccard_strict_noised=jaccard_strict(truth, noised),
        jaccard_strict_denoised=jaccard_strict(retained_truth, denoised),
        performance=performance(j_denoised, j_noised),
        retained_accuracy=retained_accuracy(result),
        mean_psnr=mean_psnr,
        kl_formula=kl_formula,
        eps_mode=result.eps_mode,
        removed_per_class=result.removal_counts(),
        baselines=dict(baselines or {}),
        config={k: format_value(v) for k, v in (config or {}).items()},
    )
    if ledger is not None:
        report.noise_rate = ledger.noise_rate
        report.removal_precision, report.removal_recall = removal_scores(dataset, result.removed, ledger)
    logging.info(f'J(N)={round(j_noised, 4)} .. J(D)={round(j_denoised, 4)} .. P={round(report.performance, 4)}')
    return report


def aggregate_reports(reports) -> pd.DataFrame:
    """mean / min / max per numeric metric over several runs (seeds)."""
    if not reports:
        raise ArgumentError('no report to aggregate')
    rows = []
    for report in reports:
        row = {}
        for key, value in report.items():
            if key.startswith('config.') or isinstance(value, bool):
                continue
            if isinstance(value, (int, float)) and value is not None:
                row[key] = float(value)
        rows.append(row)
    frame = pd.DataFrame(rows)
    summary = pd.DataFrame({'mean': frame.mean(), 'min': frame.min(), 'max': frame.max(), 'runs': frame.count()})
    summary.index.name = 'metric'
    return summary


# ================================ sweep ================================

@dataclass(frozen=True)
class SweepRecord:
    epochs: int
    mean_psnr: float
    retained_accuracy: float
    removed: int = 0


def psnr_accuracy_sweep(dataset: LabeledDataset, arch: CaeArchitecture, budgets, cfg: TrainingConfig,
                        min_points=5, eps_mode='per-class', epsilon=None, window=11, threads=1):
    """
    Trains once, pausing at each epoch budget to run the full detection pipeline.
    `dataset` must carry its true labels (accuracy is measured on the retained samples).
    """
    budgets = [int(b) for b in budgets]
    if not budgets or any(b < 1 for b in budgets) or any(a >= b for a, b in zip(budgets, budgets[1:])):
        raise ArgumentError(f'budgets must be positive and strictly ascending, got {budgets}')
    records = []
    state = None
    for budget in budgets:
        try:
            result = train(dataset, arch, dataclasses.replace(cfg, epochs=budget), state=state)
        except TrainingDivergedError as e:
            raise TrainingDivergedError(e.epoch, budget=budget) from e
        state = result.state
        detection = detect_and_remove(dataset, project(dataset, result.model), min_points=min_points,
                                      eps_mode=eps_mode, epsilon=epsilon, window=window, threads=threads)
        record = SweepRecord(epochs=budget, mean_psnr=result.history[-1].mean_psnr,
                             retained_accuracy=retained_accuracy(detection), removed=int(detection.removed.size))
        logging.info(f'sweep epochs={budget} .. psnr={round(record.mean_psnr, 3)} .. accuracy={round(record.retained_accuracy, 4)}')
        records.append(record)
    return records


def sweep_frame(records) -> pd.DataFrame:
    return pd.DataFrame([dataclasses.asdict(r) for r in records],
                        columns=['epochs', 'mean_psnr', 'retained_accuracy', 'removed'])


def sweep_correlation(records) -> float:
    """Spearman rank correlation between PSNR and retained accuracy (nan when undefined)."""
    if len(records) < 2:
        return math.nan
    psnrs = [r.mean_psnr for r in records]
    accuracies = [r.retained_accuracy for r in records]
    if len(set(psnrs)) < 2 or len(set(accuracies)) < 2:
        return math.nan
    return float(spearmanr(psnrs, accuracies).correlation)
