"""Self-check suites behind the ``verify`` command.

Each suite returns ``(passed, detail)``; :func:`run_all` runs them in order.
"""

from __future__ import annotations

import time
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import functional as F
from .config import NetworkConfig
from .cost_volume import (build_concat_volume, build_full_correlation_volume, build_gwc_volume,
                          oracle_volume)
from .gradcheck import check_gradients, naive_conv
from .model import StereoNet
from .tensor import Tensor, no_grad

TOL = 1e-6
GRAD_TOL = 1e-4


def _feature_pair(rng, n=2, c=8, h=4, w=7):
    return rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, h, w))


def suite_oracle(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        fl, fr = _feature_pair(rng)
        d = int(rng.integers(1, 9))
        pairs = [
            (build_full_correlation_volume(Tensor(fl), Tensor(fr), d), oracle_volume("corr", fl, fr, d)),
            (build_gwc_volume(Tensor(fl), Tensor(fr), d, 4), oracle_volume("gwc", fl, fr, d, 4)),
            (build_concat_volume(Tensor(fl), Tensor(fr), d), oracle_volume("concat", fl, fr, d)),
        ]
        worst = max(worst, *(float(np.abs(a.data - b).max()) for a, b in pairs))
    return worst <= TOL, f"max deviation {worst:.2e}"


def suite_degeneracy(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        fl, fr = _feature_pair(rng)
        a = build_gwc_volume(Tensor(fl), Tensor(fr), 5, 1).data
        b = build_full_correlation_volume(Tensor(fl), Tensor(fr), 5).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst <= TOL, f"Ng=1 vs full correlation max deviation {worst:.2e}"


def suite_group_mean(rng) -> Tuple[bool, str]:
    fl, fr = _feature_pair(rng)
    g = build_gwc_volume(Tensor(fl), Tensor(fr), 5, 4).data.mean(axis=1, keepdims=True)
    c = build_full_correlation_volume(Tensor(fl), Tensor(fr), 5).data
    dev = float(np.abs(g - c).max())
    return dev <= TOL, f"max deviation {dev:.2e}"


def suite_conv_oracle(rng) -> Tuple[bool, str]:
    worst = 0.0
    for stride, pad, dil in ((1, 1, 1), (2, 1, 1), (1, 2, 2)):
        x, w = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, 3, 3))
        out = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad, dilation=dil).data
        worst = max(worst, float(np.abs(out - naive_conv(x, w, None, stride, pad, dil)).max()))
    x, w = rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3))
    out = F.conv3d(Tensor(x), Tensor(w), stride=2, padding=1).data
    worst = max(worst, float(np.abs(out - naive_conv(x, w, None, 2, 1)).max()))
    return worst <= TOL, f"max deviation {worst:.2e}"


def suite_deconv_adjoint(rng) -> Tuple[bool, str]:
    x = rng.standard_normal((1, 3, 2, 2, 2))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    y = F.conv_transpose3d(Tensor(x), Tensor(w)).data
    # transposed conv forward == input gradient of conv3d(., w) seeded with x
    probe = Tensor(np.zeros((1, 2, 4, 4, 4)), requires_grad=True)
    (F.conv3d(probe, Tensor(w), stride=2, padding=1) * x).sum().backward()
    dev = float(np.abs(y - probe.grad).max())
    return dev <= TOL, f"max deviation {dev:.2e}"


def suite_gradients(rng) -> Tuple[bool, str]:
    r = rng.standard_normal
    cases: Dict[str, Tuple[Callable, list]] = {
        "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1), [r((1, 2, 5, 5)), r((3, 2, 3, 3)), r(3)]),
        "conv3d": (lambda x, w: F.conv3d(x, w, padding=1), [r((1, 2, 3, 3, 3)), r((2, 2, 3, 3, 3))]),
        "conv_transpose3d": (lambda x, w: F.conv_transpose3d(x, w), [r((1, 2, 2, 2, 2)), r((2, 2, 3, 3, 3))]),
        "batchnorm": (lambda x, g, b: F.batchnorm(x, g, b, np.zeros(2), np.ones(2), True),
                      [r((2, 2, 3, 3)), r(2), r(2)]),
        "softmax": (lambda x: F.softmax(x, 1), [r((2, 5, 2))]),
        "upsample": (lambda x: F.upsample_trilinear(x, 4), [r((1, 1, 2, 2, 2))]),
        "gwc_volume": (lambda a, b: build_gwc_volume(a, b, 3, 2), [r((1, 4, 2, 5)), r((1, 4, 2, 5))]),
        "corr_volume": (lambda a, b: build_full_correlation_volume(a, b, 3), [r((1, 4, 2, 5)), r((1, 4, 2, 5))]),
        "concat_volume": (lambda a, b: build_concat_volume(a, b, 3), [r((1, 2, 2, 5)), r((1, 2, 2, 5))]),
        "smooth_l1": (lambda x: F.smooth_l1(x), [3 * r((4, 4)) + 0.01]),
    }
    worst, worst_name = 0.0, ""
    for name, (fn, inputs) in cases.items():
        err = max(check_gradients(fn, inputs, seed=int(rng.integers(1 << 31))))
        if err > worst:
            worst, worst_name = err, name
    return worst < GRAD_TOL, f"worst relative error {worst:.2e} ({worst_name})"


def suite_aux_removal(rng) -> Tuple[bool, str]:
    cfg = NetworkConfig(unary_channels=8, gwc_groups=2, concat_channels=2, d_max=8,
                        base_3d_channels=4, stage_blocks=(1, 1, 1, 1))
    model = StereoNet(cfg, seed=int(rng.integers(1 << 31))).eval()
    left, right = Tensor(rng.standard_normal((1, 3, 16, 32))), Tensor(rng.standard_normal((1, 3, 16, 32)))
    model.to(np.float64)
    with no_grad():
        full = model(left, right, all_outputs=True)
        final = model(left, right, all_outputs=False)
    same = len(full) == cfg.num_hourglasses + 1 and len(final) == 1 and np.array_equal(full[-1].data, final[0].data)
    return same, f"{len(full)} training outputs, {len(final)} inference output, final maps identical={same}"


def suite_shapes(rng) -> Tuple[bool, str]:
    from .nn import trace_shapes

    cfg = NetworkConfig()
    model = StereoNet(cfg).eval()
    x = Tensor(rng.standard_normal((1, 3, 64, 128)).astype(np.float32))
    with no_grad(), trace_shapes() as log:
        model(x, x, all_outputs=True)
    shapes = dict(log)
    dq, hq, wq = cfg.d_levels, 16, 32
    b = cfg.base_3d_channels
    expected = {
        "unary_l": (1, cfg.unary_channels, hq, wq),
        "volume": (1, cfg.volume_channels, dq, hq, wq),
        "prehourglass.output": (1, b, dq, hq, wq),
        "hourglass1.conv1b": (1, 2 * b, dq // 2, hq // 2, wq // 2),
        "hourglass1.conv2b": (1, 4 * b, dq // 4, hq // 4, wq // 4),
        "hourglass3.output": (1, b, dq, hq, wq),
        "output3.prob": (1, cfg.d_max, 64, 128),
        "output3.disparity": (1, 64, 128),
    }
    bad = [k for k, v in expected.items() if shapes.get(k) != v]
    return not bad, "all shapes match" if not bad else f"mismatched: {bad}"


SUITES: List[Tuple[str, Callable]] = [
    ("volume-oracle", suite_oracle),
    ("gwc-degeneracy-ng1", suite_degeneracy),
    ("group-mean-identity", suite_group_mean),
    ("conv-oracle", suite_conv_oracle),
    ("deconv-adjoint", suite_deconv_adjoint),
    ("finite-difference-gradients", suite_gradients),
    ("aux-head-removal", suite_aux_removal),
    ("desk-shapes", suite_shapes),
]


def run_all(seed: int = 0) -> List[Tuple[str, bool, str, float]]:
    results = []
    for name, fn in SUITES:
        rng = np.random.default_rng([seed, len(results)])
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail, time.perf_counter() - t0))
    return results
