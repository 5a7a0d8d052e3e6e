import gzip
import os
import struct

import numpy as np
import pytest

from dataset import LabeledDataset
from model.model import LatentPoint
from utils import DATA_DIR_ENV


def make_dataset(n_per_class=20, num_classes=3, shape=(8, 8, 1), seed=0, name='synthetic', source_format='idx'):
    """Class c images are noisy around the constant c / num_classes, so classes separate in pixel space."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.empty((labels.size,) + tuple(shape), dtype=np.float32)
    for i, label in enumerate(labels):
        level = (label + 0.5) / num_classes
        images[i] = np.clip(level + rng.normal(0, 0.03, size=shape), 0, 1)
    # quantized to 8 bit so that writers reproduce the images exactly
    images = np.rint(images * 255) / 255
    return LabeledDataset(images=images.astype(np.float32), labels=labels, true_labels=labels.copy(),
                          num_classes=num_classes, name=name, source_format=source_format)


def make_latents(points, labels, indices=None):
    points = np.asarray(points, dtype=np.float64)
    indices = np.arange(points.shape[0]) if indices is None else indices
    return [LatentPoint(int(i), int(l), p, np.ones_like(p)) for i, l, p in zip(indices, labels, points)]


def idx_image_bytes(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    return struct.pack('>IIII', 0x00000803, n, rows, cols) + pixels.tobytes()


def idx_label_bytes(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack('>II', 0x00000801, labels.size) + labels.tobytes()


@pytest.fixture
def idx_pixels():
    return np.arange(3 * 2 * 2, dtype=np.uint8).reshape(3, 2, 2) * 20


@pytest.fixture
def idx_files(tmp_path, idx_pixels):
    images = tmp_path / 'train-images-idx3-ubyte'
    labels = tmp_path / 'train-labels-idx1-ubyte'
    images.write_bytes(idx_image_bytes(idx_pixels))
    labels.write_bytes(idx_label_bytes([0, 7, 9]))
    return str(images), str(labels)


@pytest.fixture
def gz_idx_files(tmp_path, idx_pixels):
    images = tmp_path / 'train-images-idx3-ubyte.gz'
    labels = tmp_path / 'train-labels-idx1-ubyte.gz'
    with gzip.open(images, 'wb') as f:
        f.write(idx_image_bytes(idx_pixels))
    with gzip.open(labels, 'wb') as f:
        f.write(idx_label_bytes([0, 7, 9]))
    return str(images), str(labels)


@pytest.fixture
def cifar_record():
    """One CIFAR-10 record: label 3, red plane 10, green plane 20, blue plane 30, pixel (0,1) red = 200."""
    planes = np.zeros((3, 32, 32), dtype=np.uint8)
    planes[0], planes[1], planes[2] = 10, 20, 30
    planes[0, 0, 1] = 200
    return bytes([3]) + planes.tobytes()


@pytest.fixture
def synthetic():
    return make_dataset()


@pytest.fixture
def data_dir():
    path = os.environ.get(DATA_DIR_ENV)
    if not path or not os.path.isdir(path):
        pytest.skip(f'{DATA_DIR_ENV} does not point at a dataset directory')
    return path
