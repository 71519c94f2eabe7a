"""End-to-end stereo network: features -> cost volume -> aggregation -> disparities."""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from . import functional as F
from .aggregation import Aggregation
from .config import NetworkConfig
from .cost_volume import build_combined_volume, build_concat_volume, build_gwc_volume
from .features import ConcatCompression, FeatureExtractor, extract_pair
from .head import OutputModule, soft_argmin
from .nn import Module, record
from .tensor import Tensor, no_grad


class StereoNet(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.features = FeatureExtractor(cfg, rng)
        self.compress = ConcatCompression(cfg, rng) if cfg.use_concat_volume else None
        self.aggregation = Aggregation(cfg.volume_channels, cfg.base_3d_channels, cfg.num_hourglasses, rng)
        self.heads = [OutputModule(cfg.base_3d_channels, rng, f"output{i}")
                      for i in range(cfg.num_hourglasses + 1)]

    def cost_volume(self, left: Tensor, right: Tensor) -> Tensor:
        cfg = self.cfg
        fl, fr = extract_pair(self.features, left, right)
        parts = []
        if cfg.use_gwc_volume:
            parts.append(record("volume_g", build_gwc_volume(fl, fr, cfg.d_levels, cfg.gwc_groups)))
        if cfg.use_concat_volume:
            n = fl.shape[0]
            compressed = self.compress(F.concat([fl, fr], axis=0))
            parts.append(record("volume_c", build_concat_volume(compressed[:n], compressed[n:], cfg.d_levels)))
        volume = parts[0] if len(parts) == 1 else build_combined_volume(*parts)
        return record("volume", volume)

    def forward(self, left: Tensor, right: Tensor, all_outputs: Optional[bool] = None) -> List[Tensor]:
        """Disparity maps [N, H, W] in full-resolution pixels.

        ``all_outputs`` defaults to the training flag: training returns one
        map per output module (auxiliary ones first), inference evaluates
        only the last output module.
        """
        if left.shape != right.shape:
            raise ValueError(f"left/right images differ in shape: {left.shape} vs {right.shape}")
        if all_outputs is None:
            all_outputs = self.training
        volume = self.cost_volume(left, right)
        feats = self.aggregation(volume, all_outputs=all_outputs)
        heads = self.heads if all_outputs else self.heads[-1:]
        disps = []
        for head, v in zip(heads, feats):
            disps.append(record(f"{head._name}.disparity", soft_argmin(head(v, self.cfg.d_max))))
        return disps

    def inference_parameters(self) -> int:
        """Parameters touched by an inference pass (auxiliary heads excluded)."""
        aux = sum(h.num_parameters() for h in self.heads[:-1])
        return self.num_parameters() - aux


PAD_MULTIPLE = 16


def predict_disparity(model: StereoNet, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Final-output disparity [H, W] (or [N, H, W]) for normalized images.

    Inputs are zero-padded on the top and the right to a multiple of 16 and
    the prediction is cropped back to the input extents.
    """
    left, right = np.asarray(left), np.asarray(right)
    if left.shape != right.shape:
        raise ValueError(f"left/right images differ in shape: {left.shape} vs {right.shape}")
    single = left.ndim == 3
    if single:
        left, right = left[None], right[None]
    dtype = model.parameters()[0].dtype
    h, w = left.shape[-2:]
    top, pad_r = -h % PAD_MULTIPLE, -w % PAD_MULTIPLE
    widths = ((0, 0), (0, 0), (top, 0), (0, pad_r))
    lp, rp = np.pad(left, widths).astype(dtype), np.pad(right, widths).astype(dtype)
    with no_grad():
        disp = model(Tensor(lp), Tensor(rp), all_outputs=False)[-1].data
    disp = disp[:, top:, :w]
    return disp[0] if single else disp
