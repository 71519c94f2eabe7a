"""Unary feature extraction at quarter resolution.

ResNet-like extractor without spatial pyramid pooling: a stride-2 stem,
then four residual stages. conv2 halves the resolution again, conv3/conv4
stay at 1/4 (conv4 dilated by 2). The last maps of conv2, conv3 and conv4
are concatenated into the unary features.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .config import NetworkConfig, stage_widths
from .nn import Conv2d, ConvBN, Module, conv2d_bn, record
from .tensor import Tensor


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, rng, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = conv2d_bn(cin, cout, rng, stride=stride, dilation=dilation)
        self.conv2 = conv2d_bn(cout, cout, rng, dilation=dilation, relu=False)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = ConvBN(Conv2d(cin, cout, 1, rng, stride=stride), cout, relu=False)

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv2(self.conv1(x))
        shortcut = self.downsample(x) if self.downsample is not None else x
        return F.relu(out + shortcut)


def _stage(cin, cout, blocks, rng, stride=1, dilation=1):
    layers = [BasicBlock(cin, cout, rng, stride, dilation)]
    layers += [BasicBlock(cout, cout, rng, 1, dilation) for _ in range(blocks - 1)]
    return layers


class FeatureExtractor(Module):
    """Maps [N, 3, H, W] images to [N, unary_channels, H/4, W/4] features."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        c1, c2, c3, c4 = stage_widths(cfg.unary_channels)
        b1, b2, b3, b4 = cfg.stage_blocks
        self.stem = [conv2d_bn(3, c1, rng, stride=2), conv2d_bn(c1, c1, rng), conv2d_bn(c1, c1, rng)]
        self.conv1 = _stage(c1, c1, b1, rng)
        self.conv2 = _stage(c1, c2, b2, rng, stride=2)
        self.conv3 = _stage(c2, c3, b3, rng)
        self.conv4 = _stage(c3, c4, b4, rng, dilation=2)
        self.out_channels = cfg.unary_channels

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected images shaped [N, 3, H, W], got {image.shape}")
        h, w = image.shape[2:]
        if h % 4 or w % 4:
            raise ValueError(f"image extents {h}x{w} are not divisible by 4; pad the images first")
        x = image
        for layer in self.stem + self.conv1:
            x = layer(x)
        outs = []
        for stage in (self.conv2, self.conv3, self.conv4):
            for layer in stage:
                x = layer(x)
            outs.append(x)
        return F.concat(outs, axis=1)


class ConcatCompression(Module):
    """Two 2D convolutions squeezing unary features for the concatenation volume."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        mid = max(cfg.concat_channels, round(cfg.unary_channels * 128 / 320))
        self.conv1 = conv2d_bn(cfg.unary_channels, mid, rng)
        self.conv2 = Conv2d(mid, cfg.concat_channels, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        return self.conv2(self.conv1(f))


def extract_pair(extractor: FeatureExtractor, left: Tensor, right: Tensor):
    """Run the shared extractor on both views as one batch.

    Batching keeps the two views bit-identical when the inputs are, but in
    training mode the batch-norm statistics are pooled over both views.
    """
    n = left.shape[0]
    both = extractor(F.concat([left, right], axis=0))
    fl, fr = both[:n], both[n:]
    record("unary_l", fl)
    record("unary_r", fr)
    return fl, fr
