"""Sliding-window inference for arbitrary resolutions.

Tiles of the training resolution are laid on a grid with a fixed overlap (the
last row/column shifts inward to fit), each tile is restored independently
(per-tile prior extraction keeps the train/infer distribution identical), and
the outputs are blended with separable cosine-ramp weights normalized into an
exact partition of unity.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class TileSpec:
    tile: int = 448
    overlap: int = 64

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile:
            raise ConfigurationError(
                f"overlap {self.overlap} must satisfy 0 <= overlap < tile {self.tile}"
            )


def tile_starts(length, tile, overlap):
    """Start offsets covering [0, length) with the given overlap; the final
    tile is shifted inward so it ends exactly at `length`."""
    if length <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, length - tile, stride))
    starts.append(length - tile)
    return starts


def _ramp(n):
    # half-pixel-centered raised cosine, ascending from ~0 to ~1
    t = (np.arange(n) + 0.5) / n
    return 0.5 - 0.5 * np.cos(math.pi * t)


def tile_profile(tile, overlap, ramp_low, ramp_high):
    """1-D blend profile: flat 1 inside, cosine ramps on interior-facing edges."""
    w = np.ones(tile, dtype=np.float64)
    if overlap > 0:
        r = _ramp(overlap)
        if ramp_low:
            w[:overlap] *= r
        if ramp_high:
            w[tile - overlap:] *= r[::-1]
    return w


def blend_weights(h, w, spec):
    """Per-tile normalized blend weights: list of (y0, x0, weight[tile, tile]).

    The normalized weights form a partition of unity over the h x w canvas.
    """
    ys = tile_starts(h, spec.tile, spec.overlap)
    xs = tile_starts(w, spec.tile, spec.overlap)
    tiles = []
    raw_sum = np.zeros((h, w), dtype=np.float64)
    for y0 in ys:
        py = tile_profile(spec.tile, spec.overlap, y0 != ys[0], y0 != ys[-1])
        for x0 in xs:
            px = tile_profile(spec.tile, spec.overlap, x0 != xs[0], x0 != xs[-1])
            weight = py[:, None] * px[None, :]
            tiles.append((y0, x0, weight))
            raw_sum[y0:y0 + spec.tile, x0:x0 + spec.tile] += weight
    if not (raw_sum > 0).all():
        raise ConfigurationError("tile layout left uncovered pixels")
    return [
        (y0, x0, weight / raw_sum[y0:y0 + spec.tile, x0:x0 + spec.tile])
        for y0, x0, weight in tiles
    ]


def sliding_infer(image, tile_fn, spec=TileSpec()):
    """Restore an [H,W,3] image tile by tile and blend; output in [0,1].

    `tile_fn` maps one [tile,tile,3] array to its restored counterpart.
    Images smaller than the tile are reflect-padded, restored in one pass,
    and cropped back.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected [H,W,3] image, got {image.shape}")
    h, w = image.shape[:2]

    if h < spec.tile or w < spec.tile:
        ph, pw = max(0, spec.tile - h), max(0, spec.tile - w)
        if ph >= h or pw >= w:
            # reflect padding cannot exceed the source extent in one pass
            reps = (int(np.ceil((h + ph) / h)), int(np.ceil((w + pw) / w)), 1)
            big = np.tile(image, reps)[: h + ph, : w + pw]
        else:
            big = np.pad(image, [(0, ph), (0, pw), (0, 0)], mode="reflect")
        return sliding_infer(big, tile_fn, spec)[:h, :w]

    out = np.zeros((h, w, 3), dtype=np.float64)
    for y0, x0, weight in blend_weights(h, w, spec):
        patch = image[y0:y0 + spec.tile, x0:x0 + spec.tile]
        restored = np.asarray(tile_fn(patch), dtype=np.float64)
        if restored.shape != patch.shape:
            raise InputError(
                f"tile function returned {restored.shape} for {patch.shape}"
            )
        out[y0:y0 + spec.tile, x0:x0 + spec.tile] += restored * weight[:, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)
