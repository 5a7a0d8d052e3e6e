"""
-----------------------------------------------------------------------------------
Description: MNIST / Fashion-MNIST (IDX) & CIFAR-10 (binary batches) datasets,
             symmetric label noise injection with an auditable ledger
"""
import dataclasses
import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch
from sklearn.model_selection import train_test_split
from torch.utils.data import Dataset, DataLoader

from errors import (ArgumentError, ArtifactIOError, ConsistencyError, FormatError,
                    TruncationError)
from utils import round_half_up

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_RECORD = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS  # 3073

IDX_IMAGES_NAME = 'train-images-idx3-ubyte'
IDX_LABELS_NAME = 'train-labels-idx1-ubyte'
CIFAR_BATCH_NAME = 'data_batch.bin'


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    images:      (N, H, W, C) float32 in [0, 1]
    labels:      (N,) current (possibly noised) class ids
    true_labels: (N,) ground truth, never touched by noise injection
    sample_index: (N,) stable identity of each sample in the source files
    """
    images: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    num_classes: int
    bit_depth: int = 8
    name: str = 'dataset'
    source_format: str = 'idx'
    sample_index: np.ndarray = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        true_labels = np.asarray(self.true_labels, dtype=np.int64)
        n = images.shape[0]
        if images.ndim != 4:
            raise ArgumentError(f'images must be (N, H, W, C), got shape {images.shape}')
        if labels.shape != (n,) or true_labels.shape != (n,):
            raise ConsistencyError(f'{n} images but {labels.shape[0]} labels / {true_labels.shape[0]} true labels')
        for name, values in (('labels', labels), ('true_labels', true_labels)):
            if n and (values.min() < 0 or values.max() >= self.num_classes):
                raise ArgumentError(f'{name} outside [0, {self.num_classes})')
        sample_index = np.arange(n, dtype=np.int64) if self.sample_index is None \
            else np.asarray(self.sample_index, dtype=np.int64)
        if sample_index.shape != (n,) or len(np.unique(sample_index)) != n:
            raise ConsistencyError('sample_index must hold one unique id per sample')
        for name, array in (('images', images), ('labels', labels),
                            ('true_labels', true_labels), ('sample_index', sample_index)):
            # read-only view, the caller's buffer stays writable
            view = array.view()
            view.setflags(write=False)
            object.__setattr__(self, name, view)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def with_labels(self, labels) -> 'LabeledDataset':
        return dataclasses.replace(self, labels=np.array(labels, dtype=np.int64))

    def take(self, positions) -> 'LabeledDataset':
        """Subset by array position, keeping each sample's stable index."""
        positions = np.asarray(positions, dtype=np.int64)
        return dataclasses.replace(self,
                                   images=self.images[positions],
                                   labels=self.labels[positions],
                                   true_labels=self.true_labels[positions],
                                   sample_index=self.sample_index[positions])

    def positions_of(self, indices) -> np.ndarray:
        lookup = {int(s): p for p, s in enumerate(self.sample_index)}
        try:
            return np.array([lookup[int(i)] for i in indices], dtype=np.int64)
        except KeyError as e:
            raise ArgumentError(f'sample index {e.args[0]} not in dataset {self.name}') from e


@dataclass(frozen=True)
class NoiseLedger:
    flipped_indices: frozenset
    original_label: dict
    assigned_label: dict
    noise_rate: float
    rng_seed: int

    def __len__(self):
        return len(self.flipped_indices)

    def save(self, path):
        rows = sorted(self.flipped_indices)
        df = pd.DataFrame({
            'index': rows,
            'original': [self.original_label[i] for i in rows],
            'assigned': [self.assigned_label[i] for i in rows],
        })
        try:
            with open(path, 'w', encoding='utf-8', newline='') as f:
                f.write(f'# seed={self.rng_seed}\n')
                f.write(f'# rate={self.noise_rate!r}\n')
                df.to_csv(f, index=False)
        except OSError as e:
            raise ArtifactIOError(path, e) from e

    @classmethod
    def load(cls, path) -> 'NoiseLedger':
        header = {}
        try:
            with open(path, 'r', encoding='utf-8') as f:
                for line in f:
                    if not line.startswith('#'):
                        break
                    key, value = line[1:].strip().split('=', 1)
                    header[key.strip()] = value.strip()
            df = pd.read_csv(path, comment='#', dtype='int64')
        except OSError as e:
            raise ArtifactIOError(path, e) from e
        if 'seed' not in header or 'rate' not in header:
            raise FormatError(f'{path}: ledger header must carry seed and rate')
        indices = [int(i) for i in df['index']]
        return cls(flipped_indices=frozenset(indices),
                   original_label=dict(zip(indices, (int(v) for v in df['original']))),
                   assigned_label=dict(zip(indices, (int(v) for v in df['assigned']))),
                   noise_rate=float(header['rate']),
                   rng_seed=int(header['seed']))

    def flipped_mask(self, sample_index) -> np.ndarray:
        return np.array([int(i) in self.flipped_indices for i in sample_index], dtype=bool)


# ================================ readers ================================

def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    try:
        if path.endswith('.gz'):
            with gzip.open(path, 'rb') as f:
                return f.read()
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def _parse_idx_images(raw: bytes, path):
    if len(raw) < 16:
        raise TruncationError(f'{path}: IDX image header needs 16 bytes, got {len(raw)}')
    magic, count, rows, cols = struct.unpack('>IIII', raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f'{path}: bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}')
    expected = count * rows * cols
    payload = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if payload.size < expected:
        raise TruncationError(f'{path}: expected {expected} pixel bytes, got {payload.size}')
    return payload[:expected].reshape(count, rows, cols, 1)


def _parse_idx_labels(raw: bytes, path):
    if len(raw) < 8:
        raise TruncationError(f'{path}: IDX label header needs 8 bytes, got {len(raw)}')
    magic, count = struct.unpack('>II', raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f'{path}: bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}')
    payload = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if payload.size < count:
        raise TruncationError(f'{path}: expected {count} labels, got {payload.size}')
    return payload[:count]


def read_idx(images_path, labels_path, num_classes=10, name='mnist') -> LabeledDataset:
    """
    IDX format (big-endian):
        images: magic 0x00000803 | count | rows | cols | count*rows*cols ubyte pixels
        labels: magic 0x00000801 | count | count ubyte labels
    """
    pixels = _parse_idx_images(_read_bytes(images_path), images_path)
    labels = _parse_idx_labels(_read_bytes(labels_path), labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise ConsistencyError(f'{images_path} holds {pixels.shape[0]} images but '
                               f'{labels_path} holds {labels.shape[0]} labels')
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f'{labels_path}: label {labels.max()} outside [0, {num_classes})')
    bit_depth = 8
    images = pixels.astype(np.float32) / (2 ** bit_depth - 1)
    logging.info(f'{name}: read {images.shape[0]} images of shape {images.shape[1:]} from {images_path}')
    return LabeledDataset(images=images, labels=labels, true_labels=labels.copy(),
                          num_classes=num_classes, bit_depth=bit_depth, name=name, source_format='idx')


def read_cifar10(batch_paths, name='cifar10') -> LabeledDataset:
    """
    CIFAR-10 binary: records of 1 label byte + 3072 pixel bytes,
    stored as three 32x32 channel planes (R, G, B).
    """
    if not batch_paths:
        raise ArgumentError('read_cifar10 needs at least one batch file')
    labels, planes = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise FormatError(f'{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}')
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() >= 10:
            raise FormatError(f'{path}: label byte {records[:, 0].max()} outside [0, 10)')
        labels.append(records[:, 0])
        planes.append(records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE))
    labels = np.concatenate(labels)
    # (N, C, H, W) planes -> (N, H, W, C)
    pixels = np.concatenate(planes).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float32) / 255
    logging.info(f'{name}: read {images.shape[0]} images from {len(batch_paths)} batch file(s)')
    return LabeledDataset(images=images, labels=labels, true_labels=labels.copy(),
                          num_classes=10, bit_depth=8, name=name, source_format='cifar10')


# ================================ writers ================================

def _to_bytes(dataset: LabeledDataset) -> np.ndarray:
    scale = 2 ** dataset.bit_depth - 1
    return np.rint(dataset.images * scale).astype(np.uint8)


def idx_bytes(dataset: LabeledDataset):
    pixels = _to_bytes(dataset)
    n, rows, cols, channels = pixels.shape
    if channels != 1:
        raise ArgumentError(f'IDX images must be single channel, got {channels}')
    image_bytes = struct.pack('>IIII', IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack('>II', IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return image_bytes, label_bytes


def cifar10_bytes(dataset: LabeledDataset) -> bytes:
    pixels = _to_bytes(dataset)
    if pixels.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS):
        raise ArgumentError(f'CIFAR-10 records need 32x32x3 images, got {pixels.shape[1:]}')
    planes = pixels.transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], planes], axis=1)
    return records.tobytes()


def _write_file(path, payload: bytes):
    try:
        with open(path, 'wb') as f:
            f.write(payload)
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def write_idx(dataset: LabeledDataset, images_path, labels_path):
    image_bytes, label_bytes = idx_bytes(dataset)
    _write_file(images_path, image_bytes)
    _write_file(labels_path, label_bytes)


def write_cifar10(dataset: LabeledDataset, path):
    _write_file(path, cifar10_bytes(dataset))


def dataset_files(directory, source_format):
    if source_format == 'idx':
        return [os.path.join(directory, IDX_IMAGES_NAME), os.path.join(directory, IDX_LABELS_NAME)]
    return [os.path.join(directory, CIFAR_BATCH_NAME)]


def save_dataset(dataset: LabeledDataset, directory):
    """Write in the format the dataset was read from; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = dataset_files(directory, dataset.source_format)
    if dataset.source_format == 'idx':
        write_idx(dataset, *paths)
    else:
        write_cifar10(dataset, paths[0])
    return paths


def load_dataset(directory, source_format, num_classes=10, name='dataset') -> LabeledDataset:
    paths = dataset_files(directory, source_format)
    if source_format == 'idx':
        return read_idx(*paths, num_classes=num_classes, name=name)
    return read_cifar10(paths, name=name)


# ============================ noise & subsets ============================

def inject_noise(dataset: LabeledDataset, noise_rate: float, rng_seed: int):
    """
    Symmetric label noise: round(noise_rate * N) samples chosen uniformly without
    replacement, each relabeled uniformly among the other K-1 classes.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ArgumentError(f'noise_rate must lie in [0, 1], got {noise_rate}')
    k = dataset.num_classes
    if k < 2 and noise_rate > 0:
        raise ArgumentError(f'noise injection needs at least 2 classes, dataset has {k}')

    rng = np.random.default_rng(rng_seed)
    n_flip = round_half_up(noise_rate * len(dataset))
    positions = np.sort(rng.choice(len(dataset), size=n_flip, replace=False))
    # offset in [1, K-1] never maps a label onto itself
    offsets = rng.integers(1, k, size=n_flip) if n_flip else np.zeros(0, dtype=np.int64)

    labels = dataset.labels.copy()
    original = labels[positions]
    assigned = (original + offsets) % k
    labels[positions] = assigned

    indices = [int(i) for i in dataset.sample_index[positions]]
    ledger = NoiseLedger(flipped_indices=frozenset(indices),
                         original_label=dict(zip(indices, (int(v) for v in original))),
                         assigned_label=dict(zip(indices, (int(v) for v in assigned))),
                         noise_rate=float(noise_rate), rng_seed=int(rng_seed))
    logging.info(f'{dataset.name}: flipped {n_flip} of {len(dataset)} labels (rate={noise_rate}, seed={rng_seed})')
    return dataset.with_labels(labels), ledger


def restore_true_labels(dataset: LabeledDataset, ledger: NoiseLedger) -> LabeledDataset:
    """Rebuild ground truth for a dataset re-read from noised files."""
    true_labels = dataset.labels.copy()
    for position, index in enumerate(dataset.sample_index):
        index = int(index)
        if index in ledger.flipped_indices:
            if ledger.assigned_label[index] != dataset.labels[position]:
                raise ConsistencyError(f'ledger says sample {index} was assigned '
                                       f'{ledger.assigned_label[index]} but the file holds {dataset.labels[position]}')
            true_labels[position] = ledger.original_label[index]
    return dataclasses.replace(dataset, true_labels=true_labels)


def stratified_subset(dataset: LabeledDataset, size: int, rng_seed: int) -> LabeledDataset:
    """Desk-scale cap: stratified by label, source order preserved, seeded."""
    if size is None or size >= len(dataset):
        return dataset
    classes, counts = np.unique(dataset.labels, return_counts=True)
    if counts.min() < 2:
        raise ArgumentError(f'class {classes[counts.argmin()]} has a single sample, too few to stratify')
    if size < classes.size or len(dataset) - size < classes.size:
        raise ArgumentError(f'subset of {size} out of {len(dataset)} cannot stratify {classes.size} classes')
    positions, _ = train_test_split(np.arange(len(dataset)), train_size=size,
                                    stratify=dataset.labels, random_state=rng_seed)
    subset = dataset.take(np.sort(positions))
    # the subset is a dataset of its own: identities restart at 0
    return dataclasses.replace(subset, sample_index=np.arange(len(subset)))


# ============================ torch image view ============================

class ImageView(Dataset):
    """
    Images only, (C, H, W) float32 tensors. Training sees this view and never the labels.
    """
    def __init__(self, dataset: LabeledDataset):
        self.images = torch.from_numpy(np.array(dataset.images.transpose(0, 3, 1, 2), order='C'))

    def __getitem__(self, index: int):
        return self.images[index]

    def __len__(self) -> int:
        return self.images.shape[0]


def create_train_dataloader(dataset: LabeledDataset, batch_size=128, generator=None):
    return DataLoader(ImageView(dataset), batch_size, shuffle=True, generator=generator)


def create_eval_dataloader(dataset: LabeledDataset, batch_size=256):
    return DataLoader(ImageView(dataset), batch_size, shuffle=False)
