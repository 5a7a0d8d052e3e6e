"""
-----------------------------------------------------------------------------------
Description: utils functions (logging, seeding, class names, key=value files, hashing)
"""
import hashlib
import logging
import math
import os
import random

import numpy as np
import torch

from errors import ArgumentError, ArtifactIOError

DATA_DIR_ENV = 'CAE_DENOISE_DATA'

DATASET_KINDS = ('mnist', 'fashion-mnist', 'cifar10')

_LABEL_NAMES = {
    'mnist': [str(digit) for digit in range(10)],
    'fashion-mnist': ['T-shirt/top', 'Trouser', 'Pullover', 'Dress', 'Coat',
                      'Sandal', 'Shirt', 'Sneaker', 'Bag', 'Ankle boot'],
    'cifar10': ['airplane', 'automobile', 'bird', 'cat', 'deer',
                'dog', 'frog', 'horse', 'ship', 'truck'],
}


def setup_logging(run_dir=None, log_name='run.log', level=logging.INFO):
    handlers = [logging.StreamHandler()]
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(run_dir, log_name), mode='w'))
    logging.basicConfig(format='[%(levelname)s] %(message)s', level=level, handlers=handlers, force=True)


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def get_label_name(kind: str, label: int) -> str:
    names = _LABEL_NAMES.get(kind)
    if names is None or not 0 <= label < len(names):
        return str(label)
    return names[label]


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def format_value(value) -> str:
    # repr keeps floats lossless through a text round trip
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ','.join(format_value(v) for v in value)
    if value is None:
        return ''
    return str(value)


def write_key_values(path, items):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for key, value in items:
                f.write(f'{key}={format_value(value)}\n')
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def read_key_values(path) -> dict:
    values = {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith('#'):
                    continue
                if '=' not in line:
                    raise ArgumentError(f'{path}: expected key=value, got {line!r}')
                key, value = line.split('=', 1)
                values[key.strip()] = value.strip()
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    return values


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()
