"""
-----------------------------------------------------------------------------------
Description: layer primitives on top of torch autograd (conv, transposed conv,
             dense, flatten, activations), L1+L2 kernel penalty, Adam step and
             the LJT1 parameter container
"""
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ArgumentError, ArtifactIOError, FormatError, ShapeError, StateError

LAYER_KINDS = ('conv', 'transposed-conv', 'dense', 'flatten', 'activation')
ACTIVATIONS = ('identity', 'relu', 'sigmoid')

LJT_MAGIC = b'LJT1'


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_features: int = 0
    out_features: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    activation: str = 'identity'
    l1: float = 0.0
    l2: float = 0.0
    # flatten with a target shape is the inverse reshape (C, H, W)
    shape: tuple = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f'{self.name}: unknown layer kind {self.kind!r}')
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f'{self.name}: unknown activation {self.activation!r}')
        if self.kernel_size < 1 or self.stride < 1:
            raise ArgumentError(f'{self.name}: kernel size and stride must be >= 1')
        if self.l1 < 0 or self.l2 < 0:
            raise ArgumentError(f'{self.name}: regularization weights must be >= 0')
        if self.shape is not None:
            object.__setattr__(self, 'shape', tuple(self.shape))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def conv_output_size(size, kernel_size, stride=1, padding=0):
    return (size + 2 * padding - kernel_size) // stride + 1


def transposed_output_size(size, kernel_size, stride=1, padding=0, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel_size + output_padding


def output_shape(spec: LayerSpec, in_shape):
    """Shape bookkeeping without running the layer; in_shape is (C, H, W) or (units,)."""
    if spec.kind == 'conv':
        c, h, w = in_shape
        if c != spec.in_features:
            raise ShapeError(f'{spec.name}: expects {spec.in_features} channels, got {c}')
        h_out = conv_output_size(h, spec.kernel_size, spec.stride, spec.padding)
        w_out = conv_output_size(w, spec.kernel_size, spec.stride, spec.padding)
        if h_out < 1 or w_out < 1:
            raise ShapeError(f'{spec.name}: {h}x{w} input too small for kernel {spec.kernel_size}')
        return (spec.out_features, h_out, w_out)
    if spec.kind == 'transposed-conv':
        c, h, w = in_shape
        if c != spec.in_features:
            raise ShapeError(f'{spec.name}: expects {spec.in_features} channels, got {c}')
        size = lambda s: transposed_output_size(s, spec.kernel_size, spec.stride, spec.padding, spec.output_padding)
        return (spec.out_features, size(h), size(w))
    if spec.kind == 'dense':
        if tuple(in_shape) != (spec.in_features,):
            raise ShapeError(f'{spec.name}: expects {spec.in_features} units, got {in_shape}')
        return (spec.out_features,)
    if spec.kind == 'flatten':
        if spec.shape is not None:
            if int(np.prod(in_shape)) != int(np.prod(spec.shape)):
                raise ShapeError(f'{spec.name}: cannot reshape {in_shape} to {spec.shape}')
            return spec.shape
        return (int(np.prod(in_shape)),)
    return tuple(in_shape)


# ============================ functional ops ============================
# layouts: images H x W x C (or N x H x W x C), kernels k x k x C x F.

def _to_nchw(x):
    if x.dim() == 3:
        return x.permute(2, 0, 1).unsqueeze(0), True
    if x.dim() == 4:
        return x.permute(0, 3, 1, 2), False
    raise ShapeError(f'expected H x W x C or N x H x W x C input, got shape {tuple(x.shape)}')


def _from_nchw(y, single):
    y = y.permute(0, 2, 3, 1)
    return y[0] if single else y


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    if kernel.dim() != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f'kernel must be k x k x C x F, got {tuple(kernel.shape)}')
    x_nchw, single = _to_nchw(x)
    k, _, c, f = kernel.shape
    if x_nchw.shape[1] != c:
        raise ShapeError(f'input has {x_nchw.shape[1]} channels, kernel expects {c}')
    if bias.shape != (f,):
        raise ShapeError(f'bias must have {f} entries, got {tuple(bias.shape)}')
    for size in x_nchw.shape[2:]:
        if conv_output_size(size, k, stride, padding) < 1:
            raise ShapeError(f'spatial size {size} incompatible with kernel {k}, stride {stride}, padding {padding}')
    # torch weights are F x C x k x k
    y = F.conv2d(x_nchw, kernel.permute(3, 2, 0, 1), bias, stride=stride, padding=padding)
    return _from_nchw(y, single)


def conv_transpose2d_forward(x, kernel, bias, stride=1, padding=0, output_padding=0):
    """kernel k x k x C_in x F_out; upsampling counterpart of conv2d_forward."""
    if kernel.dim() != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f'kernel must be k x k x C x F, got {tuple(kernel.shape)}')
    x_nchw, single = _to_nchw(x)
    _, _, c, f = kernel.shape
    if x_nchw.shape[1] != c:
        raise ShapeError(f'input has {x_nchw.shape[1]} channels, kernel expects {c}')
    if bias.shape != (f,):
        raise ShapeError(f'bias must have {f} entries, got {tuple(bias.shape)}')
    # torch transposed weights are C_in x F_out x k x k
    y = F.conv_transpose2d(x_nchw, kernel.permute(2, 3, 0, 1), bias, stride=stride,
                           padding=padding, output_padding=output_padding)
    return _from_nchw(y, single)


def dense_forward(x, weights, bias):
    """weights are in_units x out_units."""
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f'dense: input {tuple(x.shape)}, weights {tuple(weights.shape)}, bias {tuple(bias.shape)}')
    return x @ weights + bias


def activation(x, name):
    if name == 'relu':
        return F.relu(x)
    if name == 'sigmoid':
        return torch.sigmoid(x)
    if name == 'identity':
        return x
    raise ArgumentError(f'unknown activation {name!r}')


class Activation(nn.Module):
    def __init__(self, name):
        super(Activation, self).__init__()
        self.name = name

    def forward(self, x):
        return activation(x, self.name)


def build_layer(spec: LayerSpec, generator=None) -> nn.Module:
    """torch module for one LayerSpec; kernels use seeded He-uniform fan-in init, biases start at 0."""
    if spec.kind == 'conv':
        layer = nn.Conv2d(spec.in_features, spec.out_features, kernel_size=spec.kernel_size,
                          stride=spec.stride, padding=spec.padding)
        fan_in = spec.in_features * spec.kernel_size ** 2
    elif spec.kind == 'transposed-conv':
        layer = nn.ConvTranspose2d(spec.in_features, spec.out_features, kernel_size=spec.kernel_size,
                                   stride=spec.stride, padding=spec.padding, output_padding=spec.output_padding)
        fan_in = spec.in_features * spec.kernel_size ** 2
    elif spec.kind == 'dense':
        layer = nn.Linear(spec.in_features, spec.out_features)
        fan_in = spec.in_features
    elif spec.kind == 'flatten':
        return nn.Unflatten(1, spec.shape) if spec.shape is not None else nn.Flatten()
    else:
        return Activation(spec.activation)

    bound = float(np.sqrt(6.0 / fan_in))
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.zero_()
    return layer


# ============================ gradients ============================

def parameter_set(module: nn.Module) -> 'OrderedDict[str, torch.Tensor]':
    return OrderedDict(module.named_parameters())


def kernel_parameters(params):
    """Kernel weights only; biases are never regularized."""
    return OrderedDict((name, p) for name, p in params.items() if name.endswith('weight'))


def backward(loss, params):
    """Reverse pass of a recorded scalar loss; returns gradients keyed like params."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ArgumentError('backward needs a scalar loss tensor')
    if loss.grad_fn is None:
        raise StateError('loss has no recorded forward graph')
    names = list(params)
    try:
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    except RuntimeError as e:
        # e.g. a second pass over a graph freed by an earlier backward
        raise StateError(f'backward failed: {e}') from e
    return OrderedDict(
        (name, torch.zeros_like(params[name]) if grad is None else grad)
        for name, grad in zip(names, grads)
    )


def regularizer_penalty(params, l1, l2):
    """l1 * sum|w| + l2 * sum w^2 over kernel weights."""
    if l1 < 0 or l2 < 0:
        raise ArgumentError(f'regularization weights must be >= 0, got l1={l1}, l2={l2}')
    kernels = list(kernel_parameters(params).values())
    if not kernels:
        return torch.zeros(())
    penalty = torch.zeros((), dtype=kernels[0].dtype, device=kernels[0].device)
    for w in kernels:
        penalty = penalty + l1 * w.abs().sum() + l2 * w.pow(2).sum()
    return penalty


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params, grads, state=None, hyper=AdamHyper()):
    """
    One Adam update, parameters changed in place. `state` is the torch Adam
    instance from the previous call (None on the first step).
    """
    if list(params) != list(grads):
        raise ShapeError('gradient names do not match parameter names')
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ShapeError(f'{name}: parameter {tuple(p.shape)} vs gradient {tuple(grads[name].shape)}')
    if state is None:
        state = torch.optim.Adam(list(params.values()), lr=hyper.lr,
                                 betas=(hyper.beta1, hyper.beta2), eps=hyper.eps)
    for name, p in params.items():
        p.grad = grads[name].detach().clone()
    state.step()
    state.zero_grad(set_to_none=True)
    return params, state


# ============================ LJT1 container ============================
# magic "LJT1" | u32 header length | header (utf-8 JSON) | u32 tensor count |
# per tensor: u16 name length, name, u8 rank, u32 dims..., float32 little-endian data

def save_parameters(path, params, header=None):
    header_bytes = json.dumps(header or {}, sort_keys=True).encode('utf-8')
    chunks = [LJT_MAGIC, struct.pack('<I', len(header_bytes)), header_bytes, struct.pack('<I', len(params))]
    for name, tensor in params.items():
        data = tensor.detach().cpu().numpy().astype('<f4')
        name_bytes = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(name_bytes)) + name_bytes)
        chunks.append(struct.pack('<B', data.ndim) + struct.pack(f'<{data.ndim}I', *data.shape))
        chunks.append(data.tobytes())
    try:
        with open(path, 'wb') as f:
            f.write(b''.join(chunks))
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def load_parameters(path):
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    if raw[:4] != LJT_MAGIC:
        raise FormatError(f'{path}: not an LJT1 container')
    try:
        offset = 4
        (header_len,) = struct.unpack_from('<I', raw, offset)
        offset += 4
        header = json.loads(raw[offset:offset + header_len].decode('utf-8'))
        offset += header_len
        (count,) = struct.unpack_from('<I', raw, offset)
        offset += 4
        params = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<B', raw, offset)
            offset += 1
            shape = struct.unpack_from(f'<{rank}I', raw, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) * 4
            if offset + size > len(raw):
                raise FormatError(f'{path}: tensor {name} truncated')
            data = np.frombuffer(raw, dtype='<f4', count=size // 4, offset=offset).reshape(shape)
            offset += size
            params[name] = torch.from_numpy(data.astype(np.float32))
    except struct.error as e:
        raise FormatError(f'{path}: truncated LJT1 container') from e
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f'{path}: unreadable LJT1 header or tensor name') from e
    return params, header
