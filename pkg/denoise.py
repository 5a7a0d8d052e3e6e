"""
-----------------------------------------------------------------------------------
Description: per-class outlier detection in latent space & removal of the
             suspected mislabeled samples
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from clustering import ClusterAssignment, DbscanParams, dbscan, estimate_epsilon, kdist_curve
from dataset import LabeledDataset, NoiseLedger, save_dataset
from errors import ArgumentError, ArtifactIOError, ConsistencyError
from model.model import latent_matrix

EPS_MODES = ('per-class', 'global', 'fixed')


@dataclass(eq=False)
class ClassDetection:
    label: int
    sample_indices: np.ndarray
    epsilon: float = None
    min_points: int = 5
    outliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    skipped: bool = False
    flat_curve: bool = False
    curve: np.ndarray = None
    assignment: ClusterAssignment = None


@dataclass(eq=False)
class DetectionResult:
    per_class: dict
    removed: np.ndarray
    retained: LabeledDataset
    eps_mode: str = 'per-class'
    pooled_curve: np.ndarray = None

    @property
    def retained_indices(self):
        return self.retained.sample_index

    def removal_counts(self):
        return {label: int(d.outliers.size) for label, d in sorted(self.per_class.items())}


def fitted_window(window, size):
    """Largest odd width <= window that still leaves the curve longer than the window."""
    w = min(window, size - 1)
    w -= 1 - w % 2
    return max(w, 1)


def _detect_class(label, indices, points, min_points, epsilon, window):
    detection = ClassDetection(label=label, sample_indices=indices, min_points=min_points)
    if len(indices) < min_points + 1:
        logging.warning(f'class {label}: {len(indices)} samples, too few to cluster with min_points={min_points}; skipped')
        detection.skipped = True
        return detection
    detection.curve = kdist_curve(points, min_points)
    if epsilon is None and detection.curve.size < 3:
        epsilon = float(detection.curve[-1])
    elif epsilon is None:
        estimate = estimate_epsilon(detection.curve, fitted_window(window, detection.curve.size))
        epsilon, detection.flat_curve = estimate.epsilon, estimate.flat
    if epsilon <= 0:
        # coincident points: every neighbor sits at distance 0
        epsilon = float(np.finfo(np.float64).tiny)
    detection.epsilon = float(epsilon)
    detection.assignment = dbscan(points, DbscanParams(detection.epsilon, min_points))
    detection.outliers = indices[detection.assignment.noise_mask]
    logging.info(f'class {label}: eps={round(detection.epsilon, 4)} .. {detection.outliers.size} of {len(indices)} removed')
    return detection


def detect_and_remove(dataset: LabeledDataset, latents, min_points=5, eps_mode='per-class',
                      epsilon=None, window=11, threads=1) -> DetectionResult:
    """
    Per class: k-distance curve (k = min_points), epsilon estimate, DBSCAN,
    NOISE points removed. Only the current labels carried by the latents are used.
    """
    if eps_mode not in EPS_MODES:
        raise ArgumentError(f'eps_mode must be one of {EPS_MODES}, got {eps_mode!r}')
    if eps_mode == 'fixed' and (epsilon is None or epsilon <= 0):
        raise ArgumentError('fixed eps_mode needs a positive epsilon')
    if window < 1:
        raise ArgumentError(f'smoothing window must be >= 1, got {window}')
    indices, labels, points = latent_matrix(latents)
    if len(indices) != len(dataset) or set(indices.tolist()) != set(dataset.sample_index.tolist()):
        raise ArgumentError('latent points must cover every sample of the dataset exactly once')

    pooled_curve = None
    if eps_mode == 'global':
        pooled_curve = kdist_curve(points, min_points)
        estimate = estimate_epsilon(pooled_curve, fitted_window(window, pooled_curve.size))
        epsilon = estimate.epsilon
        logging.info(f'global eps={round(epsilon, 4)} from the pooled k-distance curve')
    elif eps_mode == 'per-class':
        epsilon = None

    classes = sorted(set(labels.tolist()))
    jobs = [(c, indices[labels == c], points[labels == c]) for c in classes]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        detections = list(pool.map(lambda job: _detect_class(*job, min_points, epsilon, window), jobs))

    per_class = {d.label: d for d in detections}
    removed = np.sort(np.concatenate([d.outliers for d in detections])) if detections else np.zeros(0, dtype=np.int64)
    keep = ~np.isin(dataset.sample_index, removed)
    retained = dataset.take(np.flatnonzero(keep))
    logging.info(f'{dataset.name}: removed {removed.size} of {len(dataset)} samples, {len(retained)} retained')
    return DetectionResult(per_class=per_class, removed=removed.astype(np.int64), retained=retained, eps_mode=eps_mode,
                           pooled_curve=pooled_curve)


def removal_manifest(result: DetectionResult, ledger: NoiseLedger = None) -> pd.DataFrame:
    rows = []
    for label, detection in sorted(result.per_class.items()):
        for index in detection.outliers:
            row = {'sample_index': int(index), 'class': label, 'epsilon_used': detection.epsilon}
            if ledger is not None:
                row['was_flipped'] = int(int(index) in ledger.flipped_indices)
            rows.append(row)
    columns = ['sample_index', 'class', 'epsilon_used'] + (['was_flipped'] if ledger is not None else [])
    return pd.DataFrame(rows, columns=columns).sort_values('sample_index', kind='stable').reset_index(drop=True)


def write_cleaned(dataset: LabeledDataset, result: DetectionResult, out_dir, ledger: NoiseLedger = None):
    """Retained samples in the source format plus removal_manifest.csv; returns written paths."""
    paths = save_dataset(result.retained, out_dir)
    logging.info(f'{dataset.name}: wrote {len(result.retained)} of {len(dataset)} samples to {out_dir}')
    manifest_path = os.path.join(out_dir, 'removal_manifest.csv')
    try:
        removal_manifest(result, ledger).to_csv(manifest_path, index=False)
    except OSError as e:
        raise ArtifactIOError(manifest_path, e) from e
    return paths + [manifest_path]


def load_detection(dataset: LabeledDataset, manifest_path, eps_mode='per-class', min_points=5) -> DetectionResult:
    """Rebuild a DetectionResult over `dataset` from a removal manifest written by write_cleaned."""
    try:
        df = pd.read_csv(manifest_path)
    except OSError as e:
        raise ArtifactIOError(manifest_path, e) from e
    removed = np.sort(df['sample_index'].to_numpy(dtype=np.int64))
    unknown = set(removed.tolist()) - set(dataset.sample_index.tolist())
    if unknown:
        raise ConsistencyError(f'{manifest_path}: {len(unknown)} removed sample(s) not in {dataset.name}, e.g. {min(unknown)}')
    per_class = {}
    for label in sorted(set(dataset.labels.tolist())):
        rows = df[df['class'] == label]
        per_class[label] = ClassDetection(
            label=label,
            sample_indices=dataset.sample_index[dataset.labels == label],
            epsilon=float(rows['epsilon_used'].iloc[0]) if len(rows) else None,
            min_points=min_points,
            outliers=np.sort(rows['sample_index'].to_numpy(dtype=np.int64)))
    retained = dataset.take(np.flatnonzero(~np.isin(dataset.sample_index, removed)))
    return DetectionResult(per_class=per_class, removed=removed, retained=retained, eps_mode=eps_mode)
