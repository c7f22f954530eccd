"""Data ingestion, augmentation, synthetic generators and k-fold splitting."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor_core import Prng, ValidationError

log = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


class IdxFormatError(ValueError):
    pass


@dataclass
class TimeSeriesDataset:
    series: np.ndarray  # [N, L], z-normalized per series
    labels: np.ndarray  # [N] dense class indices
    label_table: list  # original label of each dense index

    @property
    def num_classes(self) -> int:
        return len(self.label_table)

    def __len__(self):
        return len(self.labels)


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N]
    masks: np.ndarray | None = None  # [N, H, W]
    num_classes: int = 0

    def __post_init__(self):
        if self.num_classes == 0:
            source = self.masks if self.masks is not None else self.labels
            self.num_classes = int(source.max()) + 1 if len(source) else 0

    def __len__(self):
        return len(self.labels)


# --- UCR ----------------------------------------------------------------------


def znormalize(series: np.ndarray) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    mean = series.mean(axis=1, keepdims=True)
    std = series.std(axis=1, keepdims=True)
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return np.where(flat, 0.0, (series - mean) / np.where(flat, 1.0, std))


def _parse_label(text: str, lineno: int):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"line {lineno}: label {text!r} is not numeric") from None
    if not value.is_integer():
        raise ParseError(f"line {lineno}: label {text!r} is not an integer")
    return int(value)


def read_ucr_series(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(labels, series)`` of a UCR-style TSV file, no normalization."""
    labels, rows, width = [], [], None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("\t") if "\t" in line else line.split(",")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise ParseError(f"line {lineno}: ragged row with {len(fields) - 1} values, expected {width - 1}")
            labels.append(_parse_label(fields[0], lineno))
            try:
                values = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: non-numeric value ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(f"line {lineno}: non-finite value (variable-length series are not supported)")
            rows.append(values)
    if not rows or width < 2:
        raise ParseError(f"{path}: no series found")
    return np.array(labels), np.array(rows, dtype=np.float64)


def make_timeseries(labels, series) -> TimeSeriesDataset:
    table = sorted(set(int(v) for v in labels))
    index = {v: i for i, v in enumerate(table)}
    dense_labels = np.array([index[int(v)] for v in labels], dtype=np.int64)
    return TimeSeriesDataset(znormalize(series), dense_labels, table)


def read_ucr_tsv(path: str) -> TimeSeriesDataset:
    return make_timeseries(*read_ucr_series(path))


def write_ucr_tsv(path: str, labels, series):
    with open(path, "w", encoding="utf-8") as f:
        for label, row in zip(labels, series):
            f.write("\t".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def ucr_files(path: str) -> dict[str, str]:
    """Locate train/test TSV files in a dataset directory (or a single file)."""
    if os.path.isfile(path):
        return {"all": path}
    found = {}
    for name in sorted(os.listdir(path)):
        low = name.lower()
        if not low.endswith(".tsv"):
            continue
        if low.endswith("train.tsv"):
            found["train"] = os.path.join(path, name)
        elif low.endswith("test.tsv"):
            found["test"] = os.path.join(path, name)
    if not found:
        raise ValidationError(f"no *train.tsv / *test.tsv files in {path}")
    return found


def load_timeseries(path: str, split: str | None = None) -> TimeSeriesDataset:
    """One split, or all splits pooled (``split=None``) with a shared label table."""
    files = ucr_files(path)
    keys = [split] if split else sorted(files)
    if split and split not in files:
        raise ValidationError(f"split {split!r} not found in {path}")
    parts = [read_ucr_series(files[k]) for k in keys]
    lengths = {p[1].shape[1] for p in parts}
    if len(lengths) > 1:
        raise ParseError(f"splits in {path} have different series lengths {sorted(lengths)}")
    labels = np.concatenate([p[0] for p in parts])
    series = np.concatenate([p[1] for p in parts])
    return make_timeseries(labels, series)


# --- IDX ----------------------------------------------------------------------

_IDX_CODES = {0x08: np.dtype("u1"), 0x0D: np.dtype(">f4")}


def write_idx(data: np.ndarray, path: str):
    data = np.asarray(data)
    if data.dtype == np.uint8:
        code, out = 0x08, data
    elif data.dtype == np.float32:
        code, out = 0x0D, data.astype(">f4")
    else:
        raise IdxFormatError(f"IDX supports uint8 and float32 only, got {data.dtype}")
    if data.ndim < 1 or data.ndim > 255:
        raise IdxFormatError(f"unsupported rank {data.ndim}")
    with open(path, "wb") as f:
        f.write(struct.pack("BBBB", 0, 0, code, data.ndim))
        f.write(struct.pack(">" + "I" * data.ndim, *data.shape))
        f.write(np.ascontiguousarray(out).tobytes())


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError("bad IDX magic: expected two zero bytes")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_CODES:
        raise IdxFormatError(f"unsupported IDX dtype code 0x{code:02X}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"truncated header: need {header} bytes, have {len(raw)}")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    dtype = _IDX_CODES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(raw) - header
    if actual != expected:
        raise IdxFormatError(f"payload size mismatch: expected {expected} bytes, got {actual}")
    data = np.frombuffer(raw, dtype=dtype, offset=header).reshape(shape)
    return data.astype(np.float32) if code == 0x0D else data.copy()


def read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_idx(f.read())


def save_image_dataset(ds: ImageDataset, directory: str, split: str):
    os.makedirs(directory, exist_ok=True)
    pixels = np.clip(np.round(ds.images * 255), 0, 255).astype(np.uint8)
    write_idx(pixels, os.path.join(directory, f"{split}-images.idx"))
    write_idx(np.asarray(ds.labels, dtype=np.uint8), os.path.join(directory, f"{split}-labels.idx"))
    if ds.masks is not None:
        write_idx(np.asarray(ds.masks, dtype=np.uint8), os.path.join(directory, f"{split}-masks.idx"))


def load_image_dataset(directory: str, split: str, num_classes: int = 0,
                       require_masks: bool = False) -> ImageDataset:
    images = read_idx(os.path.join(directory, f"{split}-images.idx"))
    images = images.astype(np.float64) / 255.0 if images.dtype == np.uint8 else images.astype(np.float64)
    if images.ndim == 3:
        images = images[:, None]
    labels = read_idx(os.path.join(directory, f"{split}-labels.idx")).astype(np.int64).reshape(-1)
    mask_path = os.path.join(directory, f"{split}-masks.idx")
    masks = None
    if os.path.exists(mask_path):
        masks = read_idx(mask_path).astype(np.int64)
    elif require_masks:
        raise ValidationError(f"segmentation needs {mask_path}, which is missing")
    if len(labels) != len(images) or (masks is not None and len(masks) != len(images)):
        raise ValidationError(f"{directory}/{split}: images, labels and masks disagree in count")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValidationError(f"{directory}/{split}: pixel values outside [0, 1]")
    ds = ImageDataset(images, labels, masks, num_classes)
    if masks is not None and masks.size and masks.max() >= ds.num_classes:
        raise ValidationError(f"mask label {masks.max()} >= num_classes {ds.num_classes}")
    return ds


# --- augmentation -------------------------------------------------------------


@dataclass
class AugmentConfig:
    horizontal_flip: bool = True
    rotation_range_deg: float = 15.0
    zoom_range: float = 0.2
    brightness_range: tuple = (0.8, 1.2)


def _resample(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Nearest-neighbour gather over the last two axes with zero fill."""
    h, w = img.shape[-2:]
    r = np.rint(src_r).astype(np.int64)
    c = np.rint(src_c).astype(np.int64)
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = img[..., np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)]
    return np.where(inside, out, 0).astype(img.dtype)


def geometric_transform(img: np.ndarray, flip: bool, angle_deg: float, zoom: float) -> np.ndarray:
    """Flip, then rotate about the centre, then zoom about the centre.

    Composed as one inverse coordinate map so image and mask see the same
    pixel correspondence.
    """
    h, w = img.shape[-2:]
    if not flip and angle_deg == 0 and zoom == 1:
        return img.copy()
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # undo zoom
    y, x = (rr - cy) / zoom, (cc - cx) / zoom
    # undo rotation (positive angle turns content counter-clockwise on screen)
    # rows grow downwards, so a counter-clockwise turn samples at -angle
    t = -math.radians(angle_deg)
    y, x = math.cos(t) * y - math.sin(t) * x, math.sin(t) * y + math.cos(t) * x
    # undo flip
    if flip:
        x = -x
    return _resample(img, y + cy, x + cx)


def augment(image: np.ndarray, mask: np.ndarray | None, cfg: AugmentConfig, rng: Prng):
    """Random flip / rotation / zoom / brightness on one ``[C,H,W]`` image.

    The mask gets the identical geometric transform and no brightness change.
    """
    flip = bool(cfg.horizontal_flip and rng.uniform() < 0.5)
    angle = rng.uniform(low=-cfg.rotation_range_deg, high=cfg.rotation_range_deg) if cfg.rotation_range_deg else 0.0
    zoom = rng.uniform(low=1 - cfg.zoom_range, high=1 + cfg.zoom_range) if cfg.zoom_range else 1.0
    lo, hi = cfg.brightness_range if cfg.brightness_range else (1.0, 1.0)
    bright = rng.uniform(low=lo, high=hi) if hi != lo else lo
    out = geometric_transform(image, flip, angle, zoom)
    if bright != 1.0:
        out = np.clip(out * bright, 0.0, 1.0)
    out_mask = None if mask is None else geometric_transform(mask, flip, angle, zoom)
    return out, out_mask


# --- synthetic generators -------------------------------------------------------


def _bar(size: int, angle_deg: float, cy: float, cx: float, length: float, thickness: float) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    x, y = cc - cx, cy - rr
    t = math.radians(angle_deg)
    along = x * math.cos(t) + y * math.sin(t)
    across = -x * math.sin(t) + y * math.cos(t)
    return ((np.abs(along) <= length / 2) & (np.abs(across) <= thickness / 2)).astype(np.float64)


def gen_oriented_bars(n_per_class: int, size: int, n_orientations: int, rng: Prng,
                      noise: float = 0.05) -> ImageDataset:
    """One bright bar per image; class ``c`` is the angle ``c * 180 / n_orientations``."""
    if n_orientations not in (2, 4, 8):
        raise ValidationError(f"n_orientations must be 2, 4 or 8, got {n_orientations}")
    if size < 8:
        raise ValidationError(f"size must be >= 8, got {size}")
    n = n_per_class * n_orientations
    labels = np.repeat(np.arange(n_orientations), n_per_class)
    images = np.zeros((n, 1, size, size))
    centre = (size - 1) / 2
    jitter = size / 8
    thickness = max(1.5, size / 10)
    for i, c in enumerate(labels):
        cy = centre + rng.uniform(low=-jitter, high=jitter)
        cx = centre + rng.uniform(low=-jitter, high=jitter)
        length = size * rng.uniform(low=0.5, high=0.8)
        images[i, 0] = _bar(size, c * 180.0 / n_orientations, cy, cx, length, thickness)
    if noise:
        images = np.clip(images + rng.normal(images.shape, std=noise), 0.0, 1.0)
    order = rng.permutation(n)
    return ImageDataset(images[order], labels[order], None, n_orientations)


def rotate_bars_dataset(ds: ImageDataset, n_orientations: int) -> ImageDataset:
    """Rotate every image by 90 degrees and relabel to the matching orientation class."""
    images = np.rot90(ds.images, k=1, axes=(2, 3)).copy()
    labels = (ds.labels + n_orientations // 2) % n_orientations
    return ImageDataset(images, labels, None, ds.num_classes)


def gen_shapes_seg(n: int, size: int, rng: Prng, noise: float = 0.05, max_tries: int = 200) -> ImageDataset:
    """Images with 1-3 non-overlapping rectangles (label 1) and discs (label 2)."""
    if size < 16:
        raise ValidationError(f"size must be >= 16, got {size}")
    images = np.zeros((n, 1, size, size))
    masks = np.zeros((n, size, size), dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for i in range(n):
        count = 1 + rng.integers(3)
        occupied = np.zeros((size, size), dtype=bool)
        areas = {1: 0, 2: 0}
        placed = 0
        for _ in range(max_tries):
            if placed == count:
                break
            kind = 1 + rng.integers(2)
            if kind == 1:
                hh = 2 + rng.integers(max(1, size // 3))
                ww = 2 + rng.integers(max(1, size // 3))
                top, left = rng.integers(size - hh + 1), rng.integers(size - ww + 1)
                shape = (rr >= top) & (rr < top + hh) & (cc >= left) & (cc < left + ww)
            else:
                radius = 1.5 + rng.uniform() * size / 6
                cy = radius + rng.uniform() * (size - 1 - 2 * radius)
                cx = radius + rng.uniform() * (size - 1 - 2 * radius)
                shape = (rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2
            # keep a one-pixel gap between shapes
            grown = shape.copy()
            grown[1:] |= shape[:-1]
            grown[:-1] |= shape[1:]
            grown[:, 1:] |= grown[:, :-1].copy()
            grown[:, :-1] |= grown[:, 1:].copy()
            if not shape.any() or (grown & occupied).any():
                continue
            occupied |= shape
            masks[i][shape] = kind
            images[i, 0][shape] = rng.uniform(low=0.4, high=1.0)
            areas[kind] += int(shape.sum())
            placed += 1
        labels[i] = 1 if areas[1] >= areas[2] else 2
    if noise:
        images = np.clip(images + rng.normal(images.shape, std=noise), 0.0, 1.0)
    return ImageDataset(images, labels, masks, 3)


def gen_synth_timeseries(n_per_class: int, length: int, n_classes: int, rng: Prng,
                         noise: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(labels, series)``: class ``c`` is a sinusoid with ``c + 1`` cycles.

    Labels are 1-based like most UCR files.
    """
    t = np.arange(length) / length
    labels = np.repeat(np.arange(1, n_classes + 1), n_per_class)
    series = np.zeros((len(labels), length))
    for i, lab in enumerate(labels):
        phase = rng.uniform(low=0.0, high=2 * math.pi)
        amp = rng.uniform(low=0.8, high=1.2)
        series[i] = amp * np.sin(2 * math.pi * lab * t + phase)
    series += rng.normal(series.shape, std=noise)
    order = rng.permutation(len(labels))
    return labels[order], series[order]


# --- folds --------------------------------------------------------------------


def stratified_kfold(dataset, k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``k`` (train, test) index splits whose test folds partition the data.

    Each class is shuffled and dealt round-robin, so per-class counts across
    folds differ by at most one.  Falls back to unstratified dealing (with a
    warning) when some class has fewer than ``k`` members.
    """
    labels = np.asarray(dataset.labels if hasattr(dataset, "labels") else dataset).reshape(-1)
    n = len(labels)
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds the number of samples {n}")
    rng = Prng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    fold_of = np.empty(n, dtype=np.int64)
    if counts.min() < k:
        log.warning("class %s has only %d members (< k=%d); using unstratified folds",
                    classes[counts.argmin()], counts.min(), k)
        fold_of[rng.permutation(n)] = np.arange(n) % k
    else:
        position = 0
        for c in classes:
            members = np.flatnonzero(labels == c)
            members = members[rng.permutation(len(members))]
            fold_of[members] = (position + np.arange(len(members))) % k
            position += len(members)
    all_idx = np.arange(n)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]
