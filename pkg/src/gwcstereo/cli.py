"""Command-line entry point: ``gwcstereo <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import load_model
from .config import SweepConfig, load_config, variant_flags
from .losses import MetricReport, combine_reports, evaluate
from .model import predict_disparity
from .stereo_io import (StereoSample, SyntheticConfig, filter_valid, generate_rds, load_manifest,
                        normalize_image, read_image, write_image, write_kitti_png, write_manifest,
                        write_pfm)

logger = logging.getLogger("gwcstereo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_checked(manifest, d_max: int):
    """Samples from a manifest split into (usable, skipped count) by the 10% valid-pixel rule."""
    samples = load_manifest(manifest, d_max)
    if not samples:
        raise ValueError(f"{manifest}: manifest is empty")
    kept = [s for s in samples if filter_valid(s.gt, d_max)[1]]
    return kept, len(samples) - len(kept)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(height=args.height, width=args.width, d_max=args.dmax,
                          dot_density=args.density, max_shapes=args.max_shapes,
                          seed=args.seed or 0)
    if args.count < 1:
        raise ValueError("--count must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        left, right, gt = generate_rds(cfg, i)
        names = (f"left_{i:05d}.png", f"right_{i:05d}.png", f"disp_{i:05d}.pfm")
        write_image(out / names[0], left)
        write_image(out / names[1], right)
        write_pfm(out / names[2], np.where(gt.valid_mask, gt.values, np.inf).astype(np.float32))
        rows.append(names)
    write_manifest(out / "manifest.tsv", rows)
    print(out / "manifest.tsv")
    return 0


def cmd_train(args) -> int:
    from .train import split_train_val, train

    net, tcfg, extra = load_config(args.config)
    variant = args.variant or extra.get("variant")
    if variant:
        net = replace(net, **variant_flags(variant))
    if args.seed is not None:
        tcfg.seed = args.seed
    samples, skipped = _load_checked(args.data, net.d_max)
    if args.val:
        train_set = samples
        val_set, skipped_val = _load_checked(args.val, net.d_max)
        skipped += skipped_val
    else:
        train_set, val_set = split_train_val(samples)
    if skipped:
        logger.warning("skipped %d images with less than 10%% valid pixels", skipped)
    result = train(net, train_set, val_set, tcfg, args.out)
    print(f"best_epe={result.best_epe:.4f} best_iteration={result.best_iteration} "
          f"iterations={result.iterations} checkpoint={result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    samples, skipped = _load_checked(args.data, model.cfg.d_max)
    reports = [evaluate(predict_disparity(model, s.left, s.right), s.gt) for s in samples]
    report: MetricReport = combine_reports(reports)
    print(MetricReport.CSV_HEADER)
    print(report.to_csv_row())
    print(f"skipped_images={skipped}", file=sys.stderr)
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.ckpt)
    left, right = read_image(args.left), read_image(args.right)
    if left.shape != right.shape:
        raise ValueError(f"left {left.shape[1:]} and right {right.shape[1:]} image sizes differ")
    disp = predict_disparity(model, normalize_image(left), normalize_image(right))
    write_pfm(args.out, disp.astype(np.float32))
    if args.png16:
        write_kitti_png(args.png16, disp)
    print(args.out)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(args.seed or 0)
    for name, ok, detail, seconds in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} ({seconds:.1f}s): {detail}")
    failed = [r[0] for r in results if not r[1]]
    if failed:
        raise RuntimeError(f"{len(failed)} suite(s) failed: {','.join(failed)}")
    return 0


def cmd_sweep(args) -> int:
    from .train import degradation_trend, run_sweep, split_train_val

    net, tcfg, extra = load_config(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    cfg = SweepConfig(network=net, train=tcfg)
    if "sweep_base_channels" in extra:
        cfg.base_channels = tuple(int(x) for x in extra["sweep_base_channels"].replace(",", " ").split())
    if "sweep_variants" in extra:
        cfg.variants = tuple(extra["sweep_variants"].replace(",", " ").split())
        for v in cfg.variants:
            variant_flags(v)
    if args.data:
        samples, _ = _load_checked(args.data, net.d_max)
    else:
        syn = SyntheticConfig(d_max=net.d_max, seed=tcfg.seed)
        samples = []
        for i in range(args.samples):
            left, right, gt = generate_rds(syn, i)
            samples.append(StereoSample(normalize_image(left), normalize_image(right), gt, str(i)))
    train_set, val_set = split_train_val(samples)
    rows = run_sweep(cfg, train_set, val_set, args.out)
    for variant, delta in sorted(degradation_trend(rows).items()):
        print(f"trend {variant}: epe increase from widest to narrowest = {delta:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gwcstereo", description="Group-wise correlation stereo network on numpy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="seed for every random choice")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a random-dot stereogram dataset and manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--dmax", type=int, default=32, help="disparities lie in [0, dmax)")
    p.add_argument("--density", type=float, default=0.7, help="dot density")
    p.add_argument("--max-shapes", type=int, default=SyntheticConfig.max_shapes,
                   help="up to this many foreground shapes per scene")

    p = add("train", cmd_train, "train a network; writes best.ckpt and log.csv")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--val", help="validation manifest (default: last 10%% of --data)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", choices=("gwc-cat", "gwc", "cat"), help="cost-volume variant")

    p = add("eval", cmd_eval, "print metrics of a checkpoint on a manifest as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = add("infer", cmd_infer, "predict the disparity of one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True, help="output PFM")
    p.add_argument("--png16", help="also write a 16-bit KITTI-style PNG")

    add("verify", cmd_verify, "run the oracle, identity and gradient self-checks")

    p = add("sweep", cmd_sweep, "channel-width sweep over cost-volume variants; writes a CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--data", help="manifest (default: synthetic data generated from --seed)")
    p.add_argument("--samples", type=int, default=40, help="synthetic sample count without --data")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv: List[str] = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # one parsable line instead of a traceback
        msg = " ".join(str(exc).split())
        print(f"error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
