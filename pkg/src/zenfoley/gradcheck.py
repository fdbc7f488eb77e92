"""Central finite differences, kept independent of the reverse pass they check."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(f, arrays, which, coords, eps=1e-3):
    """d f / d arrays[which][coord] for each flat ``coord`` by central differences.

    ``f`` maps a list of numpy arrays to a float.  The step actually applied is
    measured after rounding to the array dtype.
    """
    out = np.empty(len(coords), dtype=np.float64)
    base = [a.copy() for a in arrays]
    for n, c in enumerate(coords):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        flat_p = plus[which].reshape(-1)
        flat_m = minus[which].reshape(-1)
        flat_p[c] = flat_p[c] + eps
        flat_m[c] = flat_m[c] - eps
        step = float(flat_p[c]) - float(flat_m[c])
        out[n] = (float(f(plus)) - float(f(minus))) / step
    return out


def relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn, arrays, rng=None, max_coords=24, eps=1e-3, floor=1e-6):
    """Max relative error between backward() and finite differences.

    ``fn`` takes Tensors (one per array, all requiring grad) and returns a scalar
    Tensor.  The analytic pass runs at the arrays' own precision; the difference
    quotients are always evaluated in float64.  At most ``max_coords`` randomly
    chosen coordinates per array are probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(a) for a in arrays]
    wide = [a.astype(np.float64) for a in arrays]

    def f(arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*leaves)
    loss.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        size = arrays[i].size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        num = numerical_grad(f, wide, i, coords, eps)
        grad = np.zeros(arrays[i].shape) if leaf.grad is None else leaf.grad
        worst = max(worst, relative_error(grad.reshape(-1)[coords], num, floor))
    return worst


def module_gradcheck(module, loss_fn, rng, max_coords=12, eps=1e-3, floor=1e-6):
    """Max relative error over a sample of each parameter's coordinates.

    ``loss_fn()`` rebuilds the scalar loss from the module's current parameters.
    The module should already be in float64.
    """
    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for name, p in module.named_parameters().items():
        coords = np.arange(p.size) if p.size <= max_coords else rng.choice(p.size, max_coords, replace=False)
        grad = np.zeros(p.shape) if p.grad is None else p.grad
        ana = grad.reshape(-1)[coords].astype(np.float64)
        num = np.empty(len(coords))
        flat = p.data.reshape(-1)
        for n, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            fp = loss_fn().item()
            flat[c] = orig - eps
            fm = loss_fn().item()
            flat[c] = orig
            num[n] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(ana, num, floor))
    return worst
