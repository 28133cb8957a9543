"""Paired-image dataset ingestion, patch sampling, augmentation, and a
synthetic relighting generator for desk-scale experiments.

Layout convention: `root/{degraded,gt[,mask]}/NAME.png`, 8- or 16-bit PNG;
pixel values map to floats as value / (2^bits - 1). Pairs are matched by
identical relative filename; orphans are warned about, resolution-mismatched
pairs are rejected with a warning listing both shapes.
"""

import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class PairRecord:
    degraded_path: Path
    gt_path: Path
    mask_path: Path | None = None
    name: str = ""


@dataclass(frozen=True)
class PatchPair:
    """Degraded/gt patches cut from identical coordinates of one pair."""

    degraded: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        if self.degraded.shape != self.gt.shape:
            raise InputError(
                f"patch shapes differ: {self.degraded.shape} vs {self.gt.shape}"
            )


##########################################################################
## PNG I/O (8/16-bit via OpenCV)


def load_image(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"cannot decode image {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float32) / 65535.0
    raise InputError(f"unsupported pixel type {raw.dtype} in {path}")


def save_image(path, image, bit_depth=8):
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 8:
        arr = np.round(image * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        arr = np.round(image * 65535.0).astype(np.uint16)
    else:
        raise InputError(f"bit_depth must be 8 or 16, got {bit_depth}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise InputError(f"cannot write image {path}")


def load_mask(path):
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise InputError(f"cannot decode mask {path}")
    return raw > 127


def _image_size(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"cannot decode image {path}")
    return raw.shape[:2]


##########################################################################
## Dataset indexing


def index_dataset(root):
    """Match degraded/gt (and optional mask) files by relative name.

    Returns records sorted lexicographically by name; unmatched or
    inconsistent files produce warnings and are skipped.
    """
    root = Path(root)
    deg_dir, gt_dir, mask_dir = root / "degraded", root / "gt", root / "mask"
    if not deg_dir.is_dir() or not gt_dir.is_dir():
        return []
    deg = {p.name: p for p in deg_dir.iterdir() if p.is_file()}
    gt = {p.name: p for p in gt_dir.iterdir() if p.is_file()}
    masks = {p.name: p for p in mask_dir.iterdir() if p.is_file()} if mask_dir.is_dir() else {}

    for name in sorted(set(deg) ^ set(gt)):
        side = "gt" if name in gt else "degraded"
        warnings.warn(f"unmatched {side} file: {name}")

    records = []
    for name in sorted(set(deg) & set(gt)):
        ds, gs = _image_size(deg[name]), _image_size(gt[name])
        if ds != gs:
            warnings.warn(
                f"rejecting pair {name}: degraded is {ds}, gt is {gs}"
            )
            continue
        records.append(PairRecord(deg[name], gt[name], masks.get(name), name=name))
    return records


class ImageCache:
    """Tiny LRU cache of decoded images keyed by path."""

    def __init__(self, max_items=32):
        self.max_items = max_items
        self._store = OrderedDict()

    def get(self, path):
        key = str(path)
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        img = load_image(path)
        self._store[key] = img
        if len(self._store) > self.max_items:
            self._store.popitem(last=False)
        return img


##########################################################################
## Patch sampling and augmentation


def _pad_to_at_least(image, size):
    h, w = image.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, [(0, ph), (0, pw), (0, 0)], mode="reflect")


def sample_patch(record, rng, patch=448, cache=None):
    """Uniform random crop applied identically to both images of the pair."""
    deg = cache.get(record.degraded_path) if cache else load_image(record.degraded_path)
    gt = cache.get(record.gt_path) if cache else load_image(record.gt_path)
    if deg.shape != gt.shape:
        raise InputError(
            f"pair {record.name}: degraded {deg.shape} vs gt {gt.shape}"
        )
    deg = _pad_to_at_least(deg, patch)
    gt = _pad_to_at_least(gt, patch)
    h, w = deg.shape[:2]
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    sl = (slice(top, top + patch), slice(left, left + patch))
    return PatchPair(deg[sl].copy(), gt[sl].copy())


DIHEDRAL_COUNT = 8


def apply_dihedral(image, transform):
    """Apply one of the 8 axis-aligned flips/rotations (0..7)."""
    if not 0 <= transform < DIHEDRAL_COUNT:
        raise InputError(f"dihedral transform index {transform} outside 0..7")
    out = np.fliplr(image) if transform >= 4 else image
    return np.ascontiguousarray(np.rot90(out, transform % 4))


def augment(pair, rng):
    """Same uniformly-drawn dihedral transform on both patches."""
    t = int(rng.integers(0, DIHEDRAL_COUNT))
    return PatchPair(apply_dihedral(pair.degraded, t), apply_dihedral(pair.gt, t))


class PatchStream:
    """Deterministic training stream: record choice, crop and augmentation all
    come from one seeded generator (single worker)."""

    def __init__(self, records, patch=448, seed=0, augment_patches=True, cache_items=32):
        if not records:
            raise InputError("empty dataset")
        self.records = list(records)
        self.patch = patch
        self.augment = augment_patches
        self.rng = np.random.default_rng([0xDA7A, seed])
        self.cache = ImageCache(cache_items)

    def next_pair(self):
        record = self.records[int(self.rng.integers(0, len(self.records)))]
        pair = sample_patch(record, self.rng, self.patch, self.cache)
        if self.augment:
            pair = augment(pair, self.rng)
        return pair

    def next_batch(self, batch_size):
        return [self.next_pair() for _ in range(batch_size)]


##########################################################################
## Synthetic relighting generator


def _smooth_field(rng, h, w, cells, lo, hi):
    grid = rng.uniform(lo, hi, size=(cells, cells)).astype(np.float32)
    return cv2.resize(grid, (w, h), interpolation=cv2.INTER_CUBIC)


def _random_scene(rng, h, w):
    """Piecewise-structured content: smooth background + colored shapes."""
    img = np.stack([_smooth_field(rng, h, w, 4, 0.2, 0.85) for _ in range(3)], axis=2)
    for _ in range(int(rng.integers(6, 12))):
        color = rng.uniform(0.05, 0.95, size=3).tolist()
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        if rng.random() < 0.5:
            axes = (int(rng.integers(w // 12, w // 3)), int(rng.integers(h // 12, h // 3)))
            angle = float(rng.uniform(0, 180))
            cv2.ellipse(img, (cx, cy), axes, angle, 0, 360, color, thickness=-1)
        else:
            dw, dh = int(rng.integers(w // 10, w // 3)), int(rng.integers(h // 10, h // 3))
            cv2.rectangle(img, (cx - dw // 2, cy - dh // 2), (cx + dw // 2, cy + dh // 2),
                          color, thickness=-1)
    noise = rng.normal(0.0, 0.015, size=(h, w, 3)).astype(np.float32)
    img = cv2.GaussianBlur(img, (0, 0), 1.0) + noise
    return np.clip(img, 0.0, 1.0)


def _shadow_field(rng, h, w):
    """Soft multiplicative shadow field and its binary mask."""
    field = np.ones((h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.float32)
    for _ in range(int(rng.integers(1, 4))):
        stencil = np.zeros((h, w), dtype=np.float32)
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        axes = (int(rng.integers(w // 8, w // 2)), int(rng.integers(h // 8, h // 2)))
        angle = float(rng.uniform(0, 180))
        cv2.ellipse(stencil, (cx, cy), axes, angle, 0, 360, 1.0, thickness=-1)
        soft = cv2.GaussianBlur(stencil, (0, 0), max(h, w) * 0.02 + 1.0)
        depth = float(rng.uniform(0.3, 0.65))
        field *= 1.0 - depth * soft
        mask = np.maximum(mask, (soft > 0.5).astype(np.float32))
    return field, mask > 0.5


def generate_pair(rng, h, w):
    """One synthetic (gt, degraded, shadow mask) triple: gt content times a
    smooth gain field and soft shadows."""
    gt = _random_scene(rng, h, w)
    gain = np.stack([_smooth_field(rng, h, w, int(rng.integers(3, 6)), 0.45, 1.25)
                     for _ in range(3)], axis=2)
    gain = gain * rng.uniform(0.85, 1.1)
    shadow, mask = _shadow_field(rng, h, w)
    degraded = np.clip(gt * gain * shadow[:, :, None], 0.0, 1.0)
    return gt, degraded.astype(np.float32), mask


def synth_dataset(out_dir, pairs, size=(448, 448), seed=0, bit_depth=8):
    """Write a synthetic relighting dataset under the standard layout."""
    out_dir = Path(out_dir)
    h, w = size
    names = []
    for i in range(pairs):
        rng = np.random.default_rng([0x5CE11E, seed, i])
        gt, degraded, mask = generate_pair(rng, h, w)
        name = f"pair_{i:04d}.png"
        save_image(out_dir / "gt" / name, gt, bit_depth)
        save_image(out_dir / "degraded" / name, degraded, bit_depth)
        save_image(out_dir / "mask" / name, mask[:, :, None].repeat(3, axis=2), 8)
        names.append(name)
    return names
