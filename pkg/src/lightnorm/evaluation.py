"""Benchmark evaluation, the ablation runner, and feature visualization."""

import dataclasses
import json
from pathlib import Path

import numpy as np

from .data import index_dataset, load_image, load_mask, save_image, synth_dataset
from .errors import InputError
from .prior import extract_features, pca_visualize_pair
from .quality import lab_rmse, psnr, ssim_np
from .tiling import TileSpec, sliding_infer
from .training import build_state, fit, restore_image, validate

AGGREGATE_KEY = "__aggregate__"


def make_tile_fn(state):
    """Restoration callable over [tile,tile,3] arrays for sliding inference."""
    return lambda patch: restore_image(state, patch)


def evaluate(root, state, spec=TileSpec(), use_masks=True, out_path=None):
    """Sliding-window restoration + metrics over an indexed dataset.

    Returns {"per_image": [records], "aggregate": record}; each record carries
    {file, psnr, ssim, lab_rmse_total[, lab_rmse_shadow, lab_rmse_shadow_free]}.
    Optionally writes one JSON line per record plus the aggregate.
    """
    records = index_dataset(root)
    if not records:
        raise InputError(f"no pairs found under {root}")
    tile_fn = make_tile_fn(state)

    per_image = []
    for rec in records:
        degraded = load_image(rec.degraded_path)
        gt = load_image(rec.gt_path)
        restored = sliding_infer(degraded, tile_fn, spec)
        mask = load_mask(rec.mask_path) if (use_masks and rec.mask_path) else None
        rmse = lab_rmse(gt, restored, mask)
        row = {
            "file": rec.name,
            "psnr": psnr(gt, restored),
            "ssim": ssim_np(gt, restored),
            "lab_rmse_total": rmse["total"],
        }
        if mask is not None:
            row["lab_rmse_shadow"] = rmse["shadow"]
            row["lab_rmse_shadow_free"] = rmse["shadow_free"]
        per_image.append(row)

    keys = [k for k in per_image[0] if k != "file"]
    aggregate = {"file": AGGREGATE_KEY, "images": len(per_image)}
    for k in keys:
        aggregate[k] = float(np.nanmean([r.get(k, float("nan")) for r in per_image]))

    if out_path:
        with open(out_path, "w") as f:
            for row in per_image + [aggregate]:
                f.write(json.dumps(row) + "\n")
    return {"per_image": per_image, "aggregate": aggregate}


##########################################################################
## Ablation runner

# Variant rows mirroring the reference ablation grid.
DEFAULT_ABLATION_GRID = [
    {"label": "baseline", "use_prior": False},
    {"label": "A", "fusion_mode": "single_shallow"},
    {"label": "B", "fusion_mode": "single_middle"},
    {"label": "C", "fusion_mode": "single_deep"},
    {"label": "D", "fusion_mode": "sum"},
    {"label": "1", "use_freq": False},
    {"label": "2", "use_spatial": False},
    {"label": "p", "parallel_aca": True},
    {"label": "full"},
]


def run_ablation(grid, cfg, base_plan, train_records, val_pairs, steps):
    """Train every variant with identical seed/data and report validation
    metrics; purely descriptive (asserts nothing)."""
    rows = []
    for entry in grid:
        entry = dict(entry)
        label = entry.pop("label", "variant")
        plan = dataclasses.replace(base_plan, **entry)
        state = build_state(cfg, plan)
        fit(state, train_records, steps=steps)
        scores = validate(state, val_pairs)
        rows.append({"label": label, **entry, "steps": steps,
                     "psnr": scores["psnr"], "ssim": scores["ssim"]})
    return rows


def format_ablation_table(rows):
    flag_keys = sorted({k for r in rows for k in r} - {"label", "psnr", "ssim", "steps"})
    header = ["label"] + flag_keys + ["psnr", "ssim"]
    lines = ["  ".join(f"{h:>14s}" for h in header)]
    for r in rows:
        cells = [r["label"]]
        cells += [str(r.get(k, "-")) for k in flag_keys]
        cells += [f"{r['psnr']:.3f}", f"{r['ssim']:.4f}"]
        lines.append("  ".join(f"{c:>14s}" for c in cells))
    return "\n".join(lines)


##########################################################################
## Feature visualization


def _to_png_grid(viz, upscale=14):
    return np.repeat(np.repeat(viz, upscale, axis=0), upscale, axis=1)


def correlation(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float((a * b).sum() / denom)


def visualize_features(image_a, image_b, extractor, out_dir, upscale=14):
    """Write side-by-side per-layer PCA color maps for an image pair.

    Each tap's two maps share one PCA basis and one min-max range so their
    colors are comparable across the pair. Returns per-layer cross-pair
    correlations; deeper taps of a relit pair should correlate more strongly
    than shallow ones.
    """
    if isinstance(image_a, (str, Path)):
        image_a = load_image(image_a)
    if isinstance(image_b, (str, Path)):
        image_b = load_image(image_b)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pairs = pca_visualize_pair(
        extract_features(image_a, extractor), extract_features(image_b, extractor)
    )
    taps = ("shallow", "middle", "deep")
    stats = {}
    for tap, layer, (va, vb) in zip(taps, extractor.tap_layers, pairs):
        pair = np.concatenate([va, vb], axis=1)
        save_image(out_dir / f"layer{layer:02d}_{tap}_pair.png", _to_png_grid(pair, upscale))
        stats[tap] = correlation(va, vb)
    with open(out_dir / "correlations.json", "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    return stats


def synth_eval_pairs(out_dir, pairs, size, seed):
    """Convenience: synthesize a dataset and load it as (degraded, gt) pairs."""
    synth_dataset(out_dir, pairs, size=size, seed=seed)
    records = index_dataset(out_dir)
    return [(load_image(r.degraded_path), load_image(r.gt_path)) for r in records]
