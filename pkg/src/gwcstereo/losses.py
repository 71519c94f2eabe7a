"""Multi-output smooth-L1 training loss and disparity error metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .stereo_io import DisparityMap, filter_valid  # noqa: F401  (re-exported)
from .tensor import Tensor

REFERENCE_LAMBDAS = (0.5, 0.5, 0.7, 1.0)


class NoValidPixelsError(ValueError):
    pass


def smooth_l1(x):
    """0.5 x^2 where |x| < 1, |x| - 0.5 elsewhere; scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


@dataclass
class LossConfig:
    lambdas: Sequence[float] = REFERENCE_LAMBDAS

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if min(self.lambdas) < 0:
            raise ValueError("loss coefficients must be nonnegative")


def masked_smooth_l1(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean smooth-L1 of ``pred - gt`` over pixels where ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise NoValidPixelsError("no valid ground-truth pixels in the batch")
    # invalid ground truth may be inf/nan; replace before it can poison the graph
    target = np.where(mask, np.nan_to_num(gt, nan=0.0, posinf=0.0, neginf=0.0), 0.0).astype(pred.dtype)
    weights = mask.astype(pred.dtype)
    return F.sum(F.smooth_l1(pred - target) * weights) * (1.0 / count)


def total_loss(preds: Sequence[Tensor], gt: DisparityMap, cfg: LossConfig = LossConfig()) -> Tensor:
    """Weighted sum over output modules of the per-output masked mean loss.

    When fewer predictions than coefficients are given (e.g. a network
    without hourglasses) the trailing coefficients are used.
    """
    lambdas = cfg.lambdas[len(cfg.lambdas) - len(preds):] if len(preds) < len(cfg.lambdas) else cfg.lambdas
    if len(preds) != len(lambdas):
        raise ValueError(f"{len(preds)} predictions but {len(cfg.lambdas)} loss coefficients")
    for p in preds:
        if p.shape != np.shape(gt.values):
            raise ValueError(f"prediction shape {p.shape} does not match ground truth {np.shape(gt.values)}")
    loss = None
    for lam, p in zip(lambdas, preds):
        term = masked_smooth_l1(p, gt.values, gt.valid_mask) * lam
        loss = term if loss is None else loss + term
    return loss


@dataclass
class MetricReport:
    epe: float
    err1: float
    err2: float
    err3: float
    err5: float
    d1_all: float
    valid_count: int

    CSV_HEADER = "epe,err1,err2,err3,err5,d1_all,valid_count"

    def to_csv_row(self) -> str:
        return (f"{self.epe:.4f},{self.err1:.2f},{self.err2:.2f},{self.err3:.2f},"
                f"{self.err5:.2f},{self.d1_all:.2f},{self.valid_count}")


def d1_threshold(gt: np.ndarray) -> np.ndarray:
    return np.maximum(3.0, 0.05 * np.asarray(gt, dtype=np.float64))


def evaluate(pred, gt: DisparityMap) -> MetricReport:
    """EPE, >k px error rates and the D1 outlier rate over valid pixels (rates in %)."""
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    values = np.asarray(gt.values, dtype=np.float64)
    if pred.shape != values.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {values.shape}")
    mask = np.asarray(gt.valid_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise NoValidPixelsError("no valid ground-truth pixels to evaluate")
    err = np.abs(pred[mask] - values[mask])
    rate = lambda sel: 100.0 * float(np.count_nonzero(sel)) / n  # noqa: E731
    return MetricReport(
        epe=float(err.mean()),
        err1=rate(err > 1), err2=rate(err > 2), err3=rate(err > 3), err5=rate(err > 5),
        d1_all=rate(err > d1_threshold(values[mask])),
        valid_count=n,
    )


def combine_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Pixel-weighted aggregate of per-image reports."""
    total = sum(r.valid_count for r in reports)
    if total == 0:
        raise NoValidPixelsError("no valid pixels in any report")
    avg = lambda attr: sum(getattr(r, attr) * r.valid_count for r in reports) / total  # noqa: E731
    return MetricReport(avg("epe"), avg("err1"), avg("err2"), avg("err3"), avg("err5"), avg("d1_all"), total)
