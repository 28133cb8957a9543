"""Command-line interface.

Verbs: `dataset index|synth`, `train`, `infer`, `eval`, `ablate`,
`viz-features`. Exit codes: 0 ok, 1 input error, 2 configuration error,
3 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

from .config import load_run_config
from .data import index_dataset, load_image, save_image, synth_dataset
from .errors import ConfigurationError, InputError, NumericalError
from .evaluation import (
    DEFAULT_ABLATION_GRID,
    evaluate,
    format_ablation_table,
    make_tile_fn,
    run_ablation,
    visualize_features,
)
from .prior import get_extractor
from .tiling import TileSpec, sliding_infer
from .training import build_state, fit, load_checkpoint, save_checkpoint, validate

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise ConfigurationError(f"size must look like 448x448, got '{text}'") from e


def _cmd_dataset(args):
    if args.dataset_cmd == "index":
        records = index_dataset(args.root)
        for r in records:
            mask = " +mask" if r.mask_path else ""
            print(f"{r.name}{mask}")
        print(f"{len(records)} pair(s) indexed under {args.root}")
        return 0
    names = synth_dataset(args.out, args.pairs, size=_parse_size(args.size),
                          seed=args.seed, bit_depth=args.bits)
    print(f"wrote {len(names)} synthetic pair(s) to {args.out}")
    return 0


def _cmd_train(args):
    cfg, plan, data, _ = load_run_config(args.config)
    root = args.data or data.get("root")
    if not root:
        raise ConfigurationError("no dataset: pass --data or set [data] root")
    records = index_dataset(root)
    if not records:
        raise InputError(f"no pairs found under {root}")

    out_dir = Path(args.out or data.get("out_dir", "runs/latest"))
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.lnck"

    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        state = build_state(cfg, plan)

    val_pairs = None
    if data.get("val_root"):
        val_records = index_dataset(data["val_root"])
        val_pairs = [(load_image(r.degraded_path), load_image(r.gt_path))
                     for r in val_records]

    steps = args.steps if args.steps is not None else None
    fit(state, records, steps=steps, val_pairs=val_pairs,
        log_path=out_dir / "log.jsonl", checkpoint_path=ckpt,
        checkpoint_every=args.checkpoint_every, quiet=False)
    save_checkpoint(state, ckpt)
    print(f"finished at step {state.step}; checkpoint: {ckpt}")
    return 0


def _cmd_infer(args):
    state = load_checkpoint(args.model)
    spec = TileSpec(tile=args.tile, overlap=args.overlap)
    in_dir, out_dir = Path(args.input), Path(args.out)
    files = sorted(p for p in in_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES) if in_dir.is_dir() else [in_dir]
    if not files:
        raise InputError(f"no images under {in_dir}")
    tile_fn = make_tile_fn(state)
    for path in files:
        restored = sliding_infer(load_image(path), tile_fn, spec)
        save_image(out_dir / path.name, restored, bit_depth=args.bits)
        print(f"{path.name} -> {out_dir / path.name}")
    return 0


def _cmd_eval(args):
    state = load_checkpoint(args.model)
    spec = TileSpec(tile=args.tile, overlap=args.overlap)
    report = evaluate(args.data, state, spec, use_masks=args.masks,
                      out_path=args.out)
    agg = report["aggregate"]
    print(json.dumps(agg, indent=2, sort_keys=True))
    return 0


def _cmd_ablate(args):
    cfg, plan, data, variants = load_run_config(args.grid)
    grid = variants or DEFAULT_ABLATION_GRID
    root = data.get("root")
    if not root:
        raise ConfigurationError("ablation grid needs [data] root")
    records = index_dataset(root)
    if not records:
        raise InputError(f"no pairs found under {root}")
    val_root = data.get("val_root", root)
    val_records = index_dataset(val_root)
    val_pairs = [(load_image(r.degraded_path), load_image(r.gt_path))
                 for r in val_records]
    steps = args.steps or data.get("steps", 200)
    rows = run_ablation(grid, cfg, plan, records, val_pairs, steps)
    print(format_ablation_table(rows))
    if args.out:
        with open(args.out, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
    return 0


def _cmd_viz(args):
    extractor = get_extractor(args.prior, seed=args.seed,
                              weights_path=args.backbone_weights)
    stats = visualize_features(args.pair[0], args.pair[1], extractor, args.out)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lightnorm",
                                description="ambient light normalization toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="dataset_cmd", required=True)
    ds_index = ds_sub.add_parser("index", help="list matched pairs")
    ds_index.add_argument("root")
    ds_synth = ds_sub.add_parser("synth", help="generate synthetic relighting pairs")
    ds_synth.add_argument("--out", required=True)
    ds_synth.add_argument("--pairs", type=int, required=True)
    ds_synth.add_argument("--size", default="448x448")
    ds_synth.add_argument("--seed", type=int, default=0)
    ds_synth.add_argument("--bits", type=int, default=8, choices=(8, 16))
    ds.set_defaults(func=_cmd_dataset)

    tr = sub.add_parser("train", help="run/resume training")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume")
    tr.add_argument("--data")
    tr.add_argument("--out")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--checkpoint-every", type=int, default=0)
    tr.set_defaults(func=_cmd_train)

    inf = sub.add_parser("infer", help="sliding-window restoration")
    inf.add_argument("--model", required=True)
    inf.add_argument("--in", dest="input", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--tile", type=int, default=448)
    inf.add_argument("--overlap", type=int, default=64)
    inf.add_argument("--bits", type=int, default=8, choices=(8, 16))
    inf.set_defaults(func=_cmd_infer)

    ev = sub.add_parser("eval", help="benchmark evaluation")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--masks", action="store_true")
    ev.add_argument("--out")
    ev.add_argument("--tile", type=int, default=448)
    ev.add_argument("--overlap", type=int, default=64)
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="train and compare variant grid")
    ab.add_argument("--grid", required=True)
    ab.add_argument("--steps", type=int)
    ab.add_argument("--out")
    ab.set_defaults(func=_cmd_ablate)

    vz = sub.add_parser("viz-features", help="PCA feature maps for an image pair")
    vz.add_argument("--pair", nargs=2, required=True, metavar=("A", "B"))
    vz.add_argument("--out", default="feature_viz")
    vz.add_argument("--prior", default="stub")
    vz.add_argument("--seed", type=int, default=0)
    vz.add_argument("--backbone-weights")
    vz.set_defaults(func=_cmd_viz)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 1
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
