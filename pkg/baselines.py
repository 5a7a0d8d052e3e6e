"""
-----------------------------------------------------------------------------------
Description: baseline relabelers - KNN on raw image vectors & KNN in the
             eigenspace of a representative subset
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from dataset import LabeledDataset, save_dataset
from errors import ArgumentError, ArtifactIOError
from linalg import eigen_top_n, pca_project
from utils import round_half_up

CHUNK = 1024


@dataclass(frozen=True, eq=False)
class RepresentativeSet:
    indices: np.ndarray      # sample indices, ascending
    vectors: np.ndarray      # (R, pixels) flattened images
    labels: np.ndarray       # noisy labels carried by the representatives
    rng_seed: int

    def __len__(self):
        return self.indices.shape[0]


def flatten_images(dataset: LabeledDataset) -> np.ndarray:
    return dataset.images.reshape(len(dataset), -1).astype(np.float64)


def select_representatives(dataset: LabeledDataset, fraction=0.1, rng_seed=0) -> RepresentativeSet:
    """Uniform sample stratified by the (noisy) label, round(fraction * n_c) per class."""
    if not 0 < fraction <= 1:
        raise ArgumentError(f'fraction must lie in (0, 1], got {fraction}')
    rng = np.random.default_rng(rng_seed)
    chosen = []
    for label in range(dataset.num_classes):
        positions = np.flatnonzero(dataset.labels == label)
        count = min(round_half_up(fraction * positions.size), positions.size)
        if count:
            chosen.append(rng.choice(positions, size=count, replace=False))
    if not chosen:
        raise ArgumentError(f'fraction {fraction} selects no representative from {len(dataset)} samples')
    positions = np.sort(np.concatenate(chosen))
    logging.info(f'{dataset.name}: {positions.size} representatives (fraction={fraction}, seed={rng_seed})')
    return RepresentativeSet(indices=dataset.sample_index[positions].copy(),
                             vectors=flatten_images(dataset)[positions],
                             labels=dataset.labels[positions].copy(),
                             rng_seed=rng_seed)


def knn_vote(sample_vectors, sample_indices, rep_vectors, rep_indices, rep_labels, k, num_classes):
    """
    Majority label among the k nearest representatives (Euclidean); a representative
    never votes for itself, ties go to the smaller class id.
    """
    if k < 1 or k > len(rep_indices):
        raise ArgumentError(f'K must lie in [1, {len(rep_indices)}], got {k}')
    rep_position = {int(i): p for p, i in enumerate(rep_indices)}
    votes = np.empty(len(sample_indices), dtype=np.int64)
    short = 0
    for start in range(0, len(sample_indices), CHUNK):
        stop = min(start + CHUNK, len(sample_indices))
        d2 = cdist(sample_vectors[start:stop], rep_vectors, metric='sqeuclidean')
        for row, index in enumerate(sample_indices[start:stop]):
            own = rep_position.get(int(index))
            if own is not None:
                d2[row, own] = np.inf
        nearest = np.argsort(d2, axis=1, kind='stable')[:, :k]
        for row in range(stop - start):
            neighbors = nearest[row][np.isfinite(d2[row, nearest[row]])]
            short += neighbors.size < k
            counts = np.bincount(rep_labels[neighbors], minlength=num_classes)
            votes[start + row] = int(np.argmax(counts))
    if short:
        logging.warning(f'{short} representative(s) voted with fewer than K={k} neighbors after excluding themselves')
    return votes


def knn_relabel(dataset: LabeledDataset, reps: RepresentativeSet, k=11) -> LabeledDataset:
    votes = knn_vote(flatten_images(dataset), dataset.sample_index, reps.vectors, reps.indices,
                     reps.labels, k, dataset.num_classes)
    logging.info(f'baseline knn: {int((votes != dataset.labels).sum())} of {len(dataset)} labels changed')
    return dataset.with_labels(votes)


def eigen_relabel(dataset: LabeledDataset, reps: RepresentativeSet, n_components=24, k=11) -> LabeledDataset:
    basis = eigen_top_n(reps.vectors, n_components)
    votes = knn_vote(pca_project(flatten_images(dataset), basis, n_components), dataset.sample_index,
                     pca_project(reps.vectors, basis, n_components), reps.indices,
                     reps.labels, k, dataset.num_classes)
    logging.info(f'baseline eigen: {int((votes != dataset.labels).sum())} of {len(dataset)} labels changed')
    return dataset.with_labels(votes)


def relabel_manifest(before: LabeledDataset, after: LabeledDataset) -> pd.DataFrame:
    return pd.DataFrame({'sample_index': before.sample_index,
                         'old_label': before.labels,
                         'new_label': after.labels})


def write_relabeled(before: LabeledDataset, after: LabeledDataset, out_dir):
    paths = save_dataset(after, out_dir)
    manifest_path = os.path.join(out_dir, 'relabel_manifest.csv')
    try:
        relabel_manifest(before, after).to_csv(manifest_path, index=False)
    except OSError as e:
        raise ArtifactIOError(manifest_path, e) from e
    return paths + [manifest_path]
