"""
-----------------------------------------------------------------------------------
Description: Convolutional autoencoder with mu / log-variance latent heads,
             composite MSE + KL loss, PSNR and latent projection
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from dataset import LabeledDataset, create_eval_dataloader
from errors import ArgumentError, NumericError, ShapeError
from model.autodiff import LayerSpec, activation, build_layer, kernel_parameters, output_shape, parameter_set

KL_FORMULAS = ('standard', 'literal')


@dataclass(frozen=True)
class CaeArchitecture:
    input_shape: tuple           # (H, W, C)
    encoder: tuple               # 5 conv, 1 flatten, 2 dense
    decoder: tuple               # 1 dense, inverse flatten, 6 conv
    latent_dim: int = 24
    beta_kl: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, 'input_shape', tuple(self.input_shape))
        object.__setattr__(self, 'encoder', tuple(self.encoder))
        object.__setattr__(self, 'decoder', tuple(self.decoder))
        h, w, c = self.input_shape
        shape = (c, h, w)
        for spec in self.encoder:
            shape = output_shape(spec, shape)
        if shape != (2 * self.latent_dim,):
            raise ShapeError(f'encoder must end in mu and log-variance heads of {self.latent_dim} units each, got {shape}')
        shape = (self.latent_dim,)
        for spec in self.decoder:
            shape = output_shape(spec, shape)
        if shape != (c, h, w):
            raise ShapeError(f'decoder output {shape} does not match input {(c, h, w)}')

    def to_dict(self):
        return {
            'input_shape': list(self.input_shape),
            'latent_dim': self.latent_dim,
            'beta_kl': self.beta_kl,
            'encoder': [spec.to_dict() for spec in self.encoder],
            'decoder': [spec.to_dict() for spec in self.decoder],
        }

    @classmethod
    def from_dict(cls, values):
        return cls(input_shape=tuple(values['input_shape']),
                   encoder=tuple(LayerSpec.from_dict(s) for s in values['encoder']),
                   decoder=tuple(LayerSpec.from_dict(s) for s in values['decoder']),
                   latent_dim=int(values['latent_dim']),
                   beta_kl=float(values['beta_kl']))


def build_architecture(input_shape, latent_dim=24, beta_kl=1e-3, l1=1e-5, l2=1e-5) -> CaeArchitecture:
    """
    28x28x1: conv16 -> conv32/2 -> conv32 -> conv64/2 -> conv64 -> flatten -> dense128 -> dense 2*latent
    decoder: dense 7*7*64 -> reshape -> convT64 -> convT32 x2 -> conv32 -> convT16 x2 -> conv16 -> conv C (sigmoid)
    32x32x3 runs the same plan with 8x8 bottleneck.
    """
    h, w, c = input_shape
    if h % 4 or w % 4:
        raise ArgumentError(f'input sides must be divisible by 4, got {h}x{w}')
    bh, bw = h // 4, w // 4
    reg = dict(l1=l1, l2=l2)

    def conv(name, cin, cout, stride):
        return LayerSpec('conv', name, cin, cout, kernel_size=3, stride=stride, padding=1, activation='relu', **reg)

    def upconv(name, cin, cout, stride):
        return LayerSpec('transposed-conv', name, cin, cout, kernel_size=3, stride=stride, padding=1,
                         output_padding=stride - 1, activation='relu', **reg)

    encoder = (
        conv('conv1', c, 16, 1),
        conv('conv2', 16, 32, 2),
        conv('conv3', 32, 32, 1),
        conv('conv4', 32, 64, 2),
        conv('conv5', 64, 64, 1),
        LayerSpec('flatten', 'flatten'),
        LayerSpec('dense', 'dense1', 64 * bh * bw, 128, activation='relu', **reg),
        LayerSpec('dense', 'latent', 128, 2 * latent_dim, **reg),
    )
    decoder = (
        LayerSpec('dense', 'dense1', latent_dim, 64 * bh * bw, activation='relu', **reg),
        LayerSpec('flatten', 'reshape', shape=(64, bh, bw)),
        upconv('deconv1', 64, 64, 1),
        upconv('deconv2', 64, 32, 2),
        conv('conv3', 32, 32, 1),
        upconv('deconv4', 32, 16, 2),
        conv('conv5', 16, 16, 1),
        LayerSpec('conv', 'output', 16, c, kernel_size=3, stride=1, padding=1, activation='sigmoid', **reg),
    )
    return CaeArchitecture(input_shape=(h, w, c), encoder=encoder, decoder=decoder,
                           latent_dim=latent_dim, beta_kl=beta_kl)


class ConvAutoencoder(nn.Module):
    def __init__(self, arch: CaeArchitecture, generator=None):
        super(ConvAutoencoder, self).__init__()
        self.arch = arch
        self.encoder = nn.ModuleDict((spec.name, build_layer(spec, generator)) for spec in arch.encoder)
        self.decoder = nn.ModuleDict((spec.name, build_layer(spec, generator)) for spec in arch.decoder)

    @staticmethod
    def _run(layers, specs, x):
        for spec in specs:
            x = layers[spec.name](x)
            if spec.kind != 'activation':
                x = activation(x, spec.activation)
        return x

    def encode(self, x):
        """(N, C, H, W) -> mu, log-variance"""
        heads = self._run(self.encoder, self.arch.encoder, x)
        mu, logvar = heads.split(self.arch.latent_dim, dim=1)
        return mu, logvar

    def decode(self, z):
        return self._run(self.decoder, self.arch.decoder, z)

    def forward(self, x, noise_generator=None):
        """Training pass: decoder sees the reparameterized sample mu + sigma * eta."""
        mu, logvar = self.encode(x)
        sigma = torch.exp(0.5 * logvar)
        eta = torch.randn(mu.shape, generator=noise_generator, dtype=mu.dtype, device=mu.device)
        z = mu + sigma * eta
        return self.decode(z), mu, sigma

    def parameter_set(self):
        return parameter_set(self)

    def kernels(self):
        return kernel_parameters(self.parameter_set())

    def load_parameter_set(self, params):
        own = self.parameter_set()
        if list(own) != list(params):
            raise ShapeError('parameter names do not match the architecture')
        with torch.no_grad():
            for name, p in own.items():
                if p.shape != params[name].shape:
                    raise ShapeError(f'{name}: checkpoint {tuple(params[name].shape)} vs model {tuple(p.shape)}')
                p.copy_(params[name])


# ================================ losses ================================

def loss_mse(inputs, reconstructions):
    """Sum over the batch of squared L2 distances."""
    if inputs.shape != reconstructions.shape:
        raise ShapeError(f'inputs {tuple(inputs.shape)} vs reconstructions {tuple(reconstructions.shape)}')
    return (reconstructions - inputs).pow(2).sum()


def loss_kl(mu, sigma, formula='standard'):
    """
    standard:      sum_i 1/2 sum_j (mu^2 + sigma^2 - 1 - log sigma^2)
    literal:       sum_i 1/2 [sum_j (1 + log sigma^2) + |mu|^2 + |sigma|^2]
    """
    if formula not in KL_FORMULAS:
        raise ArgumentError(f'kl_formula must be one of {KL_FORMULAS}, got {formula!r}')
    if mu.shape != sigma.shape:
        raise ShapeError(f'mu {tuple(mu.shape)} vs sigma {tuple(sigma.shape)}')
    if not bool((sigma > 0).all()):
        raise NumericError('sigma entries must be positive')
    log_var = 2 * torch.log(sigma)
    if formula == 'standard':
        return 0.5 * (mu.pow(2) + sigma.pow(2) - 1 - log_var).sum()
    return 0.5 * ((1 + log_var).sum() + mu.pow(2).sum() + sigma.pow(2).sum())


def loss_total(mse, kl, beta_kl):
    return beta_kl * kl + mse


def psnr(original, reconstruction, bit_depth=8):
    """
    10 log10((2^d - 1)^2 * W * H * C / SSE), pixels rescaled to the integer range.
    Returns +inf when the images are identical.
    """
    original = np.asarray(original, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if original.shape != reconstruction.shape:
        raise ShapeError(f'original {original.shape} vs reconstruction {reconstruction.shape}')
    peak = 2.0 ** bit_depth - 1
    sse = np.sum((original * peak - reconstruction * peak) ** 2)
    if sse == 0:
        return math.inf
    return 10 * math.log10(peak ** 2 * original.size / sse)


def mean_psnr(originals, reconstructions, bit_depth=8):
    values = np.array([psnr(o, r, bit_depth) for o, r in zip(originals, reconstructions)], dtype=np.float64)
    finite = np.isfinite(values)
    if not finite.all():
        logging.warning(f'{int((~finite).sum())} perfect reconstruction(s) excluded from mean PSNR')
    if not finite.any():
        return math.inf
    return float(values[finite].mean())


# ============================ inference ============================

@dataclass(frozen=True)
class LatentPoint:
    sample_index: int
    label: int
    mu: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)


def _encode_all(model: ConvAutoencoder, dataset: LabeledDataset, batch_size, progress):
    if dataset.image_shape != model.arch.input_shape:
        raise ShapeError(f'dataset images {dataset.image_shape} vs model input {model.arch.input_shape}')
    model.eval()
    dataloader = create_eval_dataloader(dataset, batch_size)
    with torch.no_grad():
        for images in tqdm(dataloader, disable=not progress, desc='encode'):
            yield images, model.encode(images)


def project(dataset: LabeledDataset, model: ConvAutoencoder, batch_size=256, progress=False):
    """One LatentPoint per sample, located at the mu head (no sampling)."""
    mus, sigmas = [], []
    for _, (mu, logvar) in _encode_all(model, dataset, batch_size, progress):
        mus.append(mu.double().numpy())
        sigmas.append(torch.exp(0.5 * logvar).double().numpy())
    mus = np.concatenate(mus) if mus else np.zeros((0, model.arch.latent_dim))
    sigmas = np.concatenate(sigmas) if sigmas else np.zeros((0, model.arch.latent_dim))
    return [LatentPoint(int(index), int(label), mu, sigma)
            for index, label, mu, sigma in zip(dataset.sample_index, dataset.labels, mus, sigmas)]


def reconstruct(dataset: LabeledDataset, model: ConvAutoencoder, batch_size=256, progress=False):
    """Deterministic reconstructions (decoder fed with mu), (N, H, W, C)."""
    outputs = []
    for _, (mu, _) in _encode_all(model, dataset, batch_size, progress):
        with torch.no_grad():
            outputs.append(model.decode(mu).permute(0, 2, 3, 1).numpy())
    return np.concatenate(outputs) if outputs else np.zeros((0,) + dataset.image_shape, dtype=np.float32)


def latent_matrix(latents):
    """(indices, labels, mu matrix) from a list of LatentPoint."""
    indices = np.array([p.sample_index for p in latents], dtype=np.int64)
    labels = np.array([p.label for p in latents], dtype=np.int64)
    mus = np.stack([p.mu for p in latents]) if latents else np.zeros((0, 0))
    return indices, labels, mus
