"""Pre-hourglass plus stacked 3D hourglasses over a cost volume.

Each hourglass encodes twice with stride-2 convolutions and decodes with
two transposed convolutions. Both skip paths go through a 1x1x1
convolution (with batch norm, no ReLU). Hourglasses are chained without
residual links between them, so auxiliary outputs never feed the trunk.
"""

from __future__ import annotations

from typing import List

import numpy as np

from . import functional as F
from .nn import Conv3d, ConvBN, Module, conv3d_bn, deconv3d_bn, record
from .tensor import Tensor


class PreHourglass(Module):
    def __init__(self, cin: int, base: int, rng: np.random.Generator):
        super().__init__()
        self.cin = cin
        self.conv1 = [conv3d_bn(cin, base, rng), conv3d_bn(base, base, rng)]
        self.conv2 = [conv3d_bn(base, base, rng), conv3d_bn(base, base, rng)]

    def forward(self, volume: Tensor) -> Tensor:
        if volume.ndim != 5 or volume.shape[1] != self.cin:
            raise ValueError(f"pre-hourglass expects {self.cin} volume channels, got shape {volume.shape}")
        x1 = record("prehourglass.conv1", self.conv1[1](self.conv1[0](volume)))
        x2 = record("prehourglass.conv2", self.conv2[1](self.conv2[0](x1)))
        # bare sum, no trailing ReLU
        return record("prehourglass.output", x1 + x2)


class Hourglass(Module):
    def __init__(self, base: int, rng: np.random.Generator, name: str = "hourglass"):
        super().__init__()
        self._name = name
        self.conv1a = conv3d_bn(base, 2 * base, rng, stride=2)
        self.conv1b = conv3d_bn(2 * base, 2 * base, rng)
        self.conv2a = conv3d_bn(2 * base, 4 * base, rng, stride=2)
        self.conv2b = conv3d_bn(4 * base, 4 * base, rng)
        self.deconv1 = deconv3d_bn(4 * base, 2 * base, rng)
        self.shortcut1 = ConvBN(Conv3d(2 * base, 2 * base, 1, rng), 2 * base, relu=False)
        self.deconv0 = deconv3d_bn(2 * base, base, rng)
        self.shortcut0 = ConvBN(Conv3d(base, base, 1, rng), base, relu=False)

    def forward(self, x: Tensor) -> Tensor:
        if any(n % 4 for n in x.shape[2:]):
            raise ValueError(
                f"hourglass input extents {x.shape[2:]} must be divisible by 4; zero-pad the volume first")
        name = self._name
        x1a = record(f"{name}.conv1a", self.conv1a(x))
        x1 = record(f"{name}.conv1b", self.conv1b(x1a))
        x2a = record(f"{name}.conv2a", self.conv2a(x1))
        x2 = record(f"{name}.conv2b", self.conv2b(x2a))
        up1 = record(f"{name}.deconv1", self.deconv1(x2))
        sc1 = record(f"{name}.shortcut1", self.shortcut1(x1))
        plus1 = record(f"{name}.plus1", F.relu(up1 + sc1))
        up0 = record(f"{name}.deconv0", self.deconv0(plus1))
        sc0 = record(f"{name}.shortcut0", self.shortcut0(x))
        return record(f"{name}.output", F.relu(up0 + sc0))


class Aggregation(Module):
    """Returns the feature volumes that feed the output modules.

    With ``all_outputs`` the list holds the pre-hourglass volume followed by
    every hourglass output; otherwise only the last hourglass output.
    """

    def __init__(self, cin: int, base: int, num_hourglasses: int, rng: np.random.Generator):
        super().__init__()
        self.pre = PreHourglass(cin, base, rng)
        self.hourglasses = [Hourglass(base, rng, f"hourglass{i + 1}") for i in range(num_hourglasses)]

    def forward(self, volume: Tensor, all_outputs: bool = True) -> List[Tensor]:
        d, h, w = volume.shape[2:]
        padded = F.pad(volume, ((0, 0), (0, 0), (0, -d % 4), (0, -h % 4), (0, -w % 4)))
        x = self.pre(padded)
        outs = [x]
        for hg in self.hourglasses:
            x = hg(x)
            outs.append(x)
        if not all_outputs:
            outs = outs[-1:]
        if padded.shape != volume.shape:
            outs = [v[:, :, :d, :h, :w] for v in outs]
        return outs
