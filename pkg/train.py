"""
-----------------------------------------------------------------------------------
Description: Training of the convolutional autoencoder, per-epoch history & checkpoints
"""
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.utils.tensorboard as tensorboard
from tqdm import tqdm

from dataset import LabeledDataset, create_train_dataloader
from errors import ArgumentError, ArtifactIOError, ShapeError, TrainingDivergedError
from model.autodiff import AdamHyper, backward, load_parameters, optimizer_step, regularizer_penalty, save_parameters
from model.model import (KL_FORMULAS, CaeArchitecture, ConvAutoencoder, loss_kl, loss_mse, loss_total,
                         mean_psnr, reconstruct)
from utils import seed_everything

HISTORY_COLUMNS = ['epoch', 'loss_total', 'loss_mse', 'loss_kl', 'mean_psnr']


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta_kl: float = 1e-3
    rng_seed: int = 0
    kl_formula: str = 'standard'
    l1: float = 1e-5
    l2: float = 1e-5
    progress_bar: bool = True
    tensorboard_dir: str = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError('epochs and batch_size must be >= 1')
        if self.beta_kl < 0:
            raise ArgumentError(f'beta_kl must be >= 0, got {self.beta_kl}')
        if self.kl_formula not in KL_FORMULAS:
            raise ArgumentError(f'kl_formula must be one of {KL_FORMULAS}, got {self.kl_formula!r}')


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_total: float
    loss_mse: float
    loss_kl: float
    mean_psnr: float


@dataclass
class TrainingState:
    """Everything needed to continue a run to a larger epoch budget."""
    model: ConvAutoencoder
    optimizer: torch.optim.Optimizer = None
    shuffle_generator: torch.Generator = None
    noise_generator: torch.Generator = None
    epoch: int = 0
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    params: dict
    history: list
    state: TrainingState

    @property
    def model(self):
        return self.state.model


def init_state(arch: CaeArchitecture, cfg: TrainingConfig) -> TrainingState:
    seed_everything(cfg.rng_seed)
    init_generator = torch.Generator().manual_seed(cfg.rng_seed)
    return TrainingState(model=ConvAutoencoder(arch, init_generator),
                         shuffle_generator=torch.Generator().manual_seed(cfg.rng_seed + 1),
                         noise_generator=torch.Generator().manual_seed(cfg.rng_seed + 2))


def train(dataset: LabeledDataset, arch: CaeArchitecture, cfg: TrainingConfig, progress=None, state=None) -> TrainResult:
    """
    Trains (or continues `state`) up to cfg.epochs. Only the image view of the
    dataset reaches the loop; `progress` is called with each EpochRecord.
    """
    if len(dataset) == 0:
        raise ArgumentError('cannot train on an empty dataset')
    if dataset.image_shape != arch.input_shape:
        raise ShapeError(f'dataset images {dataset.image_shape} vs architecture input {arch.input_shape}')
    if state is None:
        state = init_state(arch, cfg)

    model = state.model
    params = model.parameter_set()
    hyper = AdamHyper(lr=cfg.learning_rate)
    dataloader = create_train_dataloader(dataset, cfg.batch_size, generator=state.shuffle_generator)
    writer = None
    if cfg.tensorboard_dir:
        writer = tensorboard.SummaryWriter(cfg.tensorboard_dir)

    for epoch in range(state.epoch, cfg.epochs):
        model.train()
        sums = np.zeros(3, dtype=np.float64)
        for images in tqdm(dataloader, disable=not cfg.progress_bar, desc=f'epoch {epoch + 1}/{cfg.epochs}'):
            reconstructions, mu, sigma = model(images, state.noise_generator)
            if not (torch.isfinite(reconstructions).all() and torch.isfinite(mu).all()
                    and torch.isfinite(sigma).all() and (sigma > 0).all()):
                raise TrainingDivergedError(epoch + 1, message='non-finite forward pass')
            mse = loss_mse(images, reconstructions)
            kl = loss_kl(mu, sigma, cfg.kl_formula)
            total = loss_total(mse, kl, cfg.beta_kl)
            objective = total + regularizer_penalty(params, cfg.l1, cfg.l2)
            if not torch.isfinite(objective):
                raise TrainingDivergedError(epoch + 1)

            grads = backward(objective, params)
            params, state.optimizer = optimizer_step(params, grads, state.optimizer, hyper)
            # sequential float64 accumulation keeps the epoch sums reproducible
            sums += (total.item(), mse.item(), kl.item())

        n = len(dataset)
        record = EpochRecord(epoch=epoch + 1,
                             loss_total=float(sums[0] / n),
                             loss_mse=float(sums[1] / n),
                             loss_kl=float(sums[2] / n),
                             mean_psnr=mean_psnr(dataset.images, reconstruct(dataset, model), dataset.bit_depth))
        state.history.append(record)
        state.epoch = epoch + 1
        logging.info(f'\ttraining epoch={record.epoch} .. loss={round(record.loss_total, 4)} '
                     f'mse={round(record.loss_mse, 4)} kl={round(record.loss_kl, 4)} psnr={round(record.mean_psnr, 3)}')
        if writer is not None:
            for key in HISTORY_COLUMNS[1:]:
                writer.add_scalar(key, getattr(record, key), record.epoch)
        if progress is not None:
            progress(record)

    if writer is not None:
        samples = dataset.images[:16]
        writer.add_images('originals', samples, global_step=state.epoch, dataformats='NHWC')
        writer.add_images('reconstructions', reconstruct(dataset.take(np.arange(len(samples))), model),
                          global_step=state.epoch, dataformats='NHWC')
        writer.close()

    return TrainResult(params=model.parameter_set(), history=list(state.history), state=state)


# ============================ history & checkpoints ============================

def history_frame(history) -> pd.DataFrame:
    return pd.DataFrame([dataclasses.asdict(r) for r in history], columns=HISTORY_COLUMNS)


def save_history(history, path):
    try:
        history_frame(history).to_csv(path, index=False)
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def save_checkpoint(path, model: ConvAutoencoder, epoch, extra=None):
    header = {'architecture': model.arch.to_dict(), 'epoch': epoch}
    if extra:
        header['config'] = extra
    save_parameters(path, model.parameter_set(), header)
    logging.info(f'\t*** Saved checkpoint in {path} ***')


def load_checkpoint(path):
    params, header = load_parameters(path)
    arch = CaeArchitecture.from_dict(header['architecture'])
    model = ConvAutoencoder(arch)
    model.load_parameter_set(params)
    model.eval()
    logging.info(f'\tLoaded checkpoint from {path} (epoch {header.get("epoch")})')
    return model, header
