"""Finite-difference gradient checking and a loop-based convolution oracle."""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                   indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place).

    With ``indices`` only those entries are perturbed; the rest stay zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = indices if indices is not None else list(np.ndindex(*x.shape))
    for idx in it:
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                    h: float = 1e-5) -> list:
    """Relative errors of the analytic vs numeric gradient for every input.

    The output of ``fn`` is reduced to a scalar with fixed random weights so
    every output entry contributes to the check.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)
    (out * weights).sum().backward()

    def scalar():
        return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

    errors = []
    for t, a in zip(tensors, arrays):
        num = numerical_grad(scalar, a, h)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        errors.append(relative_error(ana, num))
    return errors


def naive_conv(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None, stride=1,
               padding=0, dilation=1) -> np.ndarray:
    """Direct nested-loop cross-correlation for any number of spatial dims."""
    nsp = x.ndim - 2
    stride = (stride,) * nsp if np.isscalar(stride) else tuple(stride)
    padding = (padding,) * nsp if np.isscalar(padding) else tuple(padding)
    dilation = (dilation,) * nsp if np.isscalar(dilation) else tuple(dilation)
    n, cin = x.shape[:2]
    cout = w.shape[0]
    ksize = w.shape[2:]
    in_sp = x.shape[2:]
    out_sp = tuple((in_sp[i] + 2 * padding[i] - dilation[i] * (ksize[i] - 1) - 1) // stride[i] + 1
                   for i in range(nsp))
    out = np.zeros((n, cout) + out_sp)
    for bi in range(n):
        for co in range(cout):
            for opos in itertools.product(*(range(s) for s in out_sp)):
                acc = 0.0 if b is None else float(b[co])
                for ci in range(cin):
                    for kpos in itertools.product(*(range(k) for k in ksize)):
                        ipos = tuple(opos[i] * stride[i] + kpos[i] * dilation[i] - padding[i]
                                     for i in range(nsp))
                        if all(0 <= ipos[i] < in_sp[i] for i in range(nsp)):
                            acc += x[(bi, ci) + ipos] * w[(co, ci) + kpos]
                out[(bi, co) + opos] = acc
    return out
