"""Output modules: score volume -> probability volume -> soft-argmin disparity."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .nn import Conv3d, Module, conv3d_bn, record
from .tensor import Tensor


class OutputModule(Module):
    def __init__(self, base: int, rng: np.random.Generator, name: str = "output"):
        super().__init__()
        self._name = name
        self.conv1 = conv3d_bn(base, base, rng)
        self.conv2 = Conv3d(base, 1, 3, rng, padding=1)

    def forward(self, v: Tensor, d_max: int) -> Tensor:
        """[N, base, Dq, Hq, Wq] -> probabilities [N, d_max, 4*Hq, 4*Wq]."""
        if d_max != 4 * v.shape[2]:
            raise ValueError(f"d_max={d_max} does not equal 4 x volume depth ({v.shape[2]})")
        x = record(f"{self._name}.conv1", self.conv1(v))
        score = record(f"{self._name}.conv2", self.conv2(x))
        score = record(f"{self._name}.score", F.upsample_trilinear(score, 4))
        n, _, d, h, w = score.shape
        prob = F.softmax(F.reshape(score, (n, d, h, w)), axis=1)
        return record(f"{self._name}.prob", prob)


def soft_argmin(prob: Tensor) -> Tensor:
    """Expected disparity index over axis 1 of an [N, D, H, W] probability volume."""
    d = prob.shape[1]
    levels = np.arange(d, dtype=prob.dtype).reshape(1, d, 1, 1)
    return F.sum(prob * levels, axis=1)
