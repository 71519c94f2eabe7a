"""Disparity/image file formats, dataset manifests and random-dot stereo pairs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

IMAGE_MEAN = 0.5
IMAGE_STD = 0.5


class PFMError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data: np.ndarray, scale: float = 1.0, little_endian: bool = True) -> None:
    """Write a float32 PFM (``Pf`` for [H, W], ``PF`` for [H, W, 3]); rows bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM stores [H, W] or [H, W, 3] arrays, got {data.shape}")
    if scale <= 0:
        raise ValueError("scale must be positive; endianness is encoded by its sign")
    h, w = data.shape[:2]
    order = "<" if little_endian else ">"
    signed = -scale if little_endian else scale
    body = np.flipud(data).astype(order + "f4").tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n".encode() + f"{signed}\n".encode() + body)


def read_pfm(path) -> Tuple[np.ndarray, float]:
    """Returns (array in top-to-bottom row order, absolute scale)."""
    raw = Path(path).read_bytes()
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PFMError("unexpected end of header", start)
        return raw[start:pos].decode("ascii", errors="replace"), start

    magic, off = next_token()
    if magic not in ("Pf", "PF"):
        raise PFMError(f"bad magic {magic!r}, expected 'Pf' or 'PF'", off)
    channels = 1 if magic == "Pf" else 3
    dims = []
    for _ in range(2):
        tok, off = next_token()
        try:
            dims.append(int(tok))
        except ValueError:
            raise PFMError(f"bad dimensions token {tok!r}", off) from None
    w, h = dims
    if w <= 0 or h <= 0:
        raise PFMError(f"nonpositive dimensions {w}x{h}", off)
    tok, off = next_token()
    try:
        scale = float(tok)
    except ValueError:
        raise PFMError(f"bad scale {tok!r}", off) from None
    if scale == 0:
        raise PFMError("scale is zero; its sign must encode endianness", off)
    pos += 1  # single whitespace byte ends the header
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    need = count * 4
    if len(raw) - pos < need:
        raise PFMError(f"truncated payload: need {need} bytes, have {len(raw) - pos}", pos)
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).copy(), abs(scale)


# ---------------------------------------------------------------------------
# KITTI 16-bit PNG and plain images


@dataclass
class DisparityMap:
    values: np.ndarray
    valid_mask: np.ndarray


def read_kitti_png(path) -> DisparityMap:
    """16-bit PNG disparity: raw / 256, raw 0 marks a missing pixel."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
        raw = np.array(im)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a single channel, got shape {raw.shape}")
    raw = raw.astype(np.int64)
    if raw.min() < 0 or raw.max() > 65535:
        raise FormatError(f"{path}: values outside the 16-bit range")
    valid = raw > 0
    values = np.where(valid, raw / 256.0, 0.0).astype(np.float32)
    return DisparityMap(values, valid)


def write_kitti_png(path, disparity: np.ndarray, valid_mask: Optional[np.ndarray] = None) -> None:
    disparity = np.asarray(disparity, dtype=np.float64)
    if valid_mask is None:
        valid_mask = np.isfinite(disparity) & (disparity > 0)
    raw = np.clip(np.round(np.nan_to_num(disparity, posinf=0.0) * 256.0), 0, 65535).astype(np.uint16)
    raw[~valid_mask] = 0
    Image.fromarray(raw).save(path)


def read_image(path) -> np.ndarray:
    """8-bit PNG/PPM as a uint8 [3, H, W] array."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L", "RGBA", "P"):
            raise FormatError(f"{path}: unsupported image mode {im.mode}; expected 8-bit RGB or gray")
        arr = np.array(im.convert("RGB"))
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8).transpose(1, 2, 0)).save(path)


def normalize_image(img: np.ndarray, mean: float = IMAGE_MEAN, std: float = IMAGE_STD) -> np.ndarray:
    return ((img.astype(np.float32) / 255.0) - mean) / std


def read_disparity(path, d_max: int) -> DisparityMap:
    """Ground truth from ``.pfm`` (non-finite = missing) or KITTI ``.png``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        gt = read_kitti_png(path)
        return filter_valid(gt, d_max, sparse=True)[0]
    values, _ = read_pfm(path)
    if values.ndim != 2:
        raise FormatError(f"{path}: disparity PFM must be single-channel")
    return filter_valid(DisparityMap(values, np.isfinite(values)), d_max)[0]


def filter_valid(gt: DisparityMap, d_max: int, sparse: bool = False, min_fraction: float = 0.1):
    """Restrict the mask to finite values in [0, d_max); returns (map, passes_threshold).

    ``sparse`` additionally treats 0 as missing, as in LIDAR ground truth.
    An image passes when at least ``min_fraction`` of its pixels are valid.
    """
    v = np.asarray(gt.values)
    with np.errstate(invalid="ignore"):
        mask = np.asarray(gt.valid_mask, dtype=bool) & np.isfinite(v) & (v >= 0) & (v < d_max)
        if sparse:
            mask &= v > 0
    return DisparityMap(v, mask), bool(mask.mean() >= min_fraction) if mask.size else False


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, rows: List[Tuple[str, str, str]]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write("\t".join(str(p) for p in row) + "\n")


def read_manifest(path) -> List[Tuple[Path, Path, Path]]:
    """One sample per line: left TAB right TAB ground truth; relative paths resolve against the file."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated paths, got {len(parts)}")
        rows.append(tuple((path.parent / p) if not Path(p).is_absolute() else Path(p) for p in parts))
    return rows


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt: DisparityMap
    id: str = ""


def load_sample(left_path, right_path, gt_path, d_max: int) -> StereoSample:
    left, right = read_image(left_path), read_image(right_path)
    gt = read_disparity(gt_path, d_max)
    if left.shape != right.shape or left.shape[1:] != gt.values.shape:
        raise FormatError(f"{left_path}: left/right/gt extents disagree")
    return StereoSample(normalize_image(left), normalize_image(right), gt, Path(left_path).stem)


def load_manifest(path, d_max: int) -> List[StereoSample]:
    return [load_sample(l, r, g, d_max) for l, r, g in read_manifest(path)]


# ---------------------------------------------------------------------------
# random-dot stereograms


@dataclass
class SyntheticConfig:
    height: int = 64
    width: int = 128
    d_max: int = 32
    dot_density: float = 0.7
    max_shapes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.d_max >= self.width:
            raise ValueError(f"d_max ({self.d_max}) must be smaller than the width ({self.width})")
        if not 0 < self.dot_density <= 1:
            raise ValueError("dot_density must lie in (0, 1]")
        if self.max_shapes < 0:
            raise ValueError("max_shapes must be nonnegative")
        if self.d_max < 0 or self.height < 1:
            raise ValueError("d_max must be nonnegative and height positive")


DOT_SIZES = (1, 2, 4, 8)


def _dots(rng: np.random.Generator, shape, density: float) -> np.ndarray:
    """Colored square dots of several sizes layered into one uint8 [3, H, W] image.

    Each size contributes a randomly offset grid of dots, each lit with
    probability ``density``. Coarse dots keep the texture matchable after
    the 4x downsampling of the feature extractor; 1px dots keep it sharp.
    """
    h, w = shape
    acc = np.zeros((3, h, w))
    for size in DOT_SIZES:
        oy, ox = rng.integers(0, size, size=2)
        gh, gw = (h + oy) // size + 1, (w + ox) // size + 1
        cells = rng.uniform(-1, 1, size=(3, gh, gw)) * (rng.random((gh, gw)) < density)
        up = np.repeat(np.repeat(cells, size, axis=1), size, axis=2)
        acc += up[:, oy:oy + h, ox:ox + w]
    acc /= len(DOT_SIZES) ** 0.5
    return np.clip(np.round(127.5 + 127.5 * acc), 0, 255).astype(np.uint8)


def random_disparity_field(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    """Integer piecewise-constant field built from layered rectangles and ellipses."""
    h, w = cfg.height, cfg.width
    if cfg.d_max == 0:
        return np.zeros((h, w), dtype=np.int64)
    n_shapes = int(rng.integers(0, cfg.max_shapes + 1))
    levels = np.sort(rng.integers(0, cfg.d_max, size=n_shapes + 1))
    field = np.full((h, w), levels[0], dtype=np.int64)
    yy, xx = np.mgrid[:h, :w]
    # ascending disparity: nearer shapes are painted last and occlude farther ones
    for d in levels[1:]:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.1 * h, 0.5 * h), rng.uniform(0.1 * w, 0.4 * w)
        if rng.random() < 0.5:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        field[inside] = d
    return field


def render_right_view(rng: np.random.Generator, left: np.ndarray, disp: np.ndarray, density: float):
    """Warp the left view into the right one; returns (right image, valid mask).

    Left pixel (y, x) lands on right pixel (y, x - d). When several land on the
    same right pixel the largest disparity wins; right pixels nobody lands on
    get fresh dots. A left pixel is valid iff it is the visible one.
    """
    h, w = disp.shape
    right = _dots(rng, (h, w), density)
    zbuf = np.full((h, w), -1, dtype=np.int64)
    for d in np.unique(disp):
        ys, xs = np.nonzero(disp == d)
        xr = xs - d
        keep = xr >= 0
        ys, xs, xr = ys[keep], xs[keep], xr[keep]
        right[:, ys, xr] = left[:, ys, xs]
        zbuf[ys, xr] = d
    yy, xx = np.mgrid[:h, :w]
    xr = xx - disp
    inside = xr >= 0
    valid = np.zeros((h, w), dtype=bool)
    valid[inside] = zbuf[yy[inside], xr[inside]] == disp[inside]
    return right, valid


def generate_rds(cfg: SyntheticConfig, index: int = 0):
    """Random-dot stereo pair with exact integer ground truth.

    Returns ``(left_uint8, right_uint8, DisparityMap)``; deterministic in
    ``(cfg.seed, index)``.
    """
    rng = np.random.default_rng([cfg.seed, index])
    disp = random_disparity_field(rng, cfg)
    left = _dots(rng, (cfg.height, cfg.width), cfg.dot_density)
    right, valid = render_right_view(rng, left, disp, cfg.dot_density)
    return left, right, DisparityMap(disp.astype(np.float32), valid)


def rds_sample(cfg: SyntheticConfig, index: int = 0) -> StereoSample:
    left, right, gt = generate_rds(cfg, index)
    return StereoSample(normalize_image(left), normalize_image(right), gt, f"rds_{cfg.seed}_{index:05d}")


def pad_to_multiple(img: np.ndarray, multiple: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Zero-pad [..., H, W] on the top and the right; returns (padded, (top, right))."""
    h, w = img.shape[-2:]
    top, right = -h % multiple, -w % multiple
    widths = [(0, 0)] * (img.ndim - 2) + [(top, 0), (0, right)]
    return np.pad(img, widths), (top, right)


def crop_padding(arr: np.ndarray, pads: Tuple[int, int]) -> np.ndarray:
    top, right = pads
    w = arr.shape[-1]
    return arr[..., top:, : w - right]

