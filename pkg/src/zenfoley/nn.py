"""Parameter containers, layers, optimizer and gradient clipping on top of tensor."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are Tensor attributes with ``requires_grad``; submodules are
    Module attributes or lists of Modules.  Names follow attribute paths.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if tuple(state[k].shape) != p.shape:
                raise ValueError(f"{k}: shape {tuple(state[k].shape)} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(array):
    return Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        self.weight = param(np.zeros((n_in, n_out))) if zero else uniform_init(rng, (n_in, n_out), n_in)
        self.bias = param(np.zeros(n_out))

    def forward(self, x):
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        self.weight = uniform_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        self.weight = uniform_init(rng, (c_in, c_out, kernel, kernel), c_in * kernel * kernel)
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class CausalConv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1):
        self.weight = uniform_init(rng, (kernel, c_in, c_out), c_in * kernel)
        self.bias = param(np.zeros(c_out))
        self.stride = stride

    def forward(self, x):
        return T.causal_conv1d(x, self.weight, self.bias, self.stride)


class CausalConvTranspose1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1):
        self.weight = uniform_init(rng, (kernel, c_in, c_out), c_in)
        self.bias = param(np.zeros(c_out))
        self.stride = stride

    def forward(self, x):
        return T.causal_conv_transpose1d(x, self.weight, self.bias, self.stride)


class Embedding(Module):
    def __init__(self, n, dim, rng, scale=1.0):
        self.weight = param(rng.normal(0.0, scale, size=(n, dim)))

    def forward(self, idx):
        return T.embed_lookup(idx, self.weight)


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns (norm before clipping, norm after clipping).  ``max_norm <= 0`` disables.
    """
    raw = global_grad_norm(params)
    if max_norm <= 0 or raw <= max_norm:
        return raw, raw
    scale = max_norm / (raw + 1e-12)
    for p in params:
        if p.grad is not None:
            p.grad = (p.grad.astype(np.float64) * scale).astype(p.dtype)
    return raw, global_grad_norm(params)


class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape, dtype=np.float32) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, dtype=np.float32) for k, p in self.params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.m[k] = m.astype(np.float32)
            self.v[k] = v.astype(np.float32)
            if lr == 0.0:
                continue
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.dtype)

    def state_dict(self):
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state, t):
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=np.float32)
            self.v[k] = np.array(state[f"v.{k}"], dtype=np.float32)
        self.t = int(t)
