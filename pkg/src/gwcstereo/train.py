"""Adam, learning-rate schedule, the training loop and the channel-width sweep."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import save_model
from .config import NetworkConfig, SweepConfig, TrainConfig, variant_flags
from .losses import LossConfig, MetricReport, combine_reports, evaluate, total_loss
from .model import StereoNet, predict_disparity
from .stereo_io import DisparityMap, StereoSample
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_HEADER = ["iteration", "lr", "train_loss", "val_epe", "val_d1"]


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} parameters but optimizer state for {len(state.m)}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != state.m[i].shape:
            raise ValueError(f"parameter {i} changed shape: {p.shape} vs state {state.m[i].shape}")
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Initial rate divided by ``lr_decay`` once per milestone already reached."""
    passed = sum(1 for m in cfg.lr_milestones if step >= m)
    return cfg.lr / cfg.lr_decay ** passed


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: StereoNet, samples: Sequence[StereoSample]) -> MetricReport:
    """Inference-mode metrics over samples, pixel-weighted."""
    was_training = model.training
    model.eval()
    try:
        reports = []
        for s in samples:
            pred = predict_disparity(model, s.left, s.right)
            if s.gt.valid_mask.any():
                reports.append(evaluate(pred, s.gt))
        return combine_reports(reports)
    finally:
        model.train(was_training)


def _batch(samples: Sequence[StereoSample], idx, dtype):
    left = Tensor(np.stack([samples[i].left for i in idx]).astype(dtype))
    right = Tensor(np.stack([samples[i].right for i in idx]).astype(dtype))
    gt = DisparityMap(np.stack([samples[i].gt.values for i in idx]),
                      np.stack([samples[i].gt.valid_mask for i in idx]))
    return left, right, gt


def _sample_order(rng: np.random.Generator, n: int, batch: int):
    """Endless stream of batches; reshuffled every epoch."""
    while True:
        perm = rng.permutation(n)
        if n < batch:
            perm = np.resize(perm, batch)
        for start in range(0, len(perm) - batch + 1, batch):
            yield perm[start:start + batch]


@dataclass
class TrainResult:
    model: StereoNet
    best_epe: float
    best_iteration: int
    log: List[Dict[str, object]] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    iterations: int = 0
    seconds: float = 0.0


def train(net_cfg: NetworkConfig, train_samples: Sequence[StereoSample],
          val_samples: Sequence[StereoSample], cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Train a fresh network; deterministic for a fixed ``cfg.seed``.

    Validation runs every ``val_interval`` iterations and at the end; the
    best-EPE weights go to ``out_dir/best.ckpt`` with the metric log in
    ``out_dir/log.csv``. A positive ``target_val_epe`` stops training as soon
    as validation EPE drops below it.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    model = StereoNet(net_cfg, seed=cfg.seed).to(dtype).train()
    opt = Adam(model.parameters(), cfg)
    loss_cfg = LossConfig(cfg.loss_weights)
    batches = _sample_order(rng, len(train_samples), cfg.batch_size)

    result = TrainResult(model, math.inf, 0)
    best_state = None
    last_good: Optional[Path] = None
    window: List[float] = []
    t0 = time.perf_counter()
    for it in range(1, cfg.max_iterations + 1):
        lr = lr_at(it - 1, cfg)
        left, right, gt = _batch(train_samples, next(batches), dtype)
        loss = total_loss(model(left, right), gt, loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            ref = f"; last good checkpoint: {last_good}" if last_good else "; no checkpoint saved yet"
            raise TrainingDiverged(f"non-finite loss at iteration {it}{ref}")
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        window.append(value)
        result.iterations = it

        validate = bool(val_samples) and (it % cfg.val_interval == 0 or it == cfg.max_iterations)
        if it % cfg.log_interval == 0 or validate:
            row: Dict[str, object] = {"iteration": it, "lr": lr, "train_loss": float(np.mean(window)),
                                      "val_epe": "", "val_d1": ""}
            window = []
            if validate:
                report = evaluate_model(model, val_samples)
                row["val_epe"], row["val_d1"] = report.epe, report.d1_all
                if report.epe < result.best_epe:
                    result.best_epe, result.best_iteration = report.epe, it
                    best_state = {k: v.copy() for k, v in model.state_dict().items()}
                    if out is not None:
                        save_model(out / "best.ckpt", model)
                        last_good = out / "best.ckpt"
                        result.checkpoint = last_good
            result.log.append(row)
            logger.info("iter %d lr %.6g loss %.4f val_epe %s", it, lr, row["train_loss"], row["val_epe"])
            if out is not None:
                _write_log(out / "log.csv", result.log)
            if validate and cfg.target_val_epe > 0 and result.best_epe < cfg.target_val_epe:
                break

    if not val_samples and out is not None:
        save_model(out / "best.ckpt", model)
        result.checkpoint = out / "best.ckpt"
    if best_state is not None:
        model.load_state_dict(best_state)
    result.seconds = time.perf_counter() - t0
    return result


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def split_train_val(samples: Sequence, val_fraction: float = 0.1):
    """Last ``val_fraction`` of the list (at least one sample) is validation."""
    n = len(samples)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return list(samples[:n - n_val]), list(samples[n - n_val:])


# ---------------------------------------------------------------------------
# channel sweep


def _nearest_divisor(n: int, target: float) -> int:
    divisors = [d for d in range(1, n + 1) if n % d == 0]
    return min(divisors, key=lambda d: (abs(d - target), d))


def sweep_network(base: NetworkConfig, variant: str, base_channels: int) -> NetworkConfig:
    """Scale cost-volume and 3D channels by ``base_channels / base.base_3d_channels``.

    Both variants share the same compressed concatenation width, so the
    combined volume carries exactly ``gwc_groups`` extra channels.
    """
    factor = base_channels / base.base_3d_channels
    groups = _nearest_divisor(base.unary_channels, base.gwc_groups * factor)
    concat = max(1, round(base.concat_channels * factor))
    return replace(base, base_3d_channels=base_channels, gwc_groups=groups,
                   concat_channels=concat, **variant_flags(variant))


def run_sweep(cfg: SweepConfig, train_samples, val_samples, out_csv=None) -> List[Dict[str, object]]:
    """Train every (variant, width) cell on the same budget; one row per cell."""
    rows = []
    for variant in cfg.variants:
        for b in cfg.base_channels:
            net = sweep_network(cfg.network, variant, b)
            result = train(net, train_samples, val_samples, cfg.train)
            rows.append({
                "variant": variant,
                "base_channels": b,
                "volume_channels": net.volume_channels,
                "parameters": result.model.num_parameters(),
                "epe": result.best_epe,
            })
            logger.info("sweep %s base=%d params=%d epe=%.4f", variant, b, rows[-1]["parameters"], result.best_epe)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def degradation_trend(rows: Sequence[Dict[str, object]]) -> Dict[str, float]:
    """EPE increase from the widest to the narrowest width, per variant."""
    out = {}
    for variant in {r["variant"] for r in rows}:
        sel = sorted((r for r in rows if r["variant"] == variant), key=lambda r: r["base_channels"])
        out[variant] = float(sel[0]["epe"]) - float(sel[-1]["epe"])
    return out
