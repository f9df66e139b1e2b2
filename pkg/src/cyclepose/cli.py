"""Command line entry point: ``cyclepose <command> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("cyclepose")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _pairs_from_folder(folder: Path, limit: int | None = None):
    """(image, mask) pairs from ``folder/images`` and ``folder/masks``."""
    from .data import DatasetError, _find_mask, list_images, normalize_percentile, read_image, read_mask
    img_dir, mask_dir = folder / "images", folder / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{folder} must contain images/ and masks/")
    files = list_images(img_dir)[:limit]
    if not files:
        raise DatasetError(f"no images in {img_dir}")
    return [(normalize_percentile(read_image(p)), read_mask(_find_mask(mask_dir, p.name))) for p in files]


def _training_images(cfg, images_override: str | None):
    """Training images as [0, 1] arrays.  Masks are never opened here."""
    from .data import DatasetError, DatasetManifest, ingest, list_images, normalize_percentile, read_image
    data = dict(cfg.data)
    if images_override:
        data = {"train_images": images_override}
    if "train_images" in data:
        files = list_images(data["train_images"])
        if not files:
            raise DatasetError(f"no training images in {data['train_images']}")
        lo, hi = data.get("percentiles", (1.0, 99.0))
        return [normalize_percentile(read_image(p), lo, hi) for p in files]
    if "manifest" in data:
        return ingest(DatasetManifest.load(data["manifest"]), data.get("cache_dir")).train_images()
    raise DatasetError("no training data: set [data] train_images or manifest, or pass --images")


def _apply_overrides(cfg, args):
    train = cfg.train
    changes = {}
    for name in ("seed", "max_steps", "epochs_const", "epochs_decay", "crop", "select_every"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "ablate", None):
        changes["ablation"] = train.ablation.without(args.ablate.split(","))
    if changes:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(train, **changes))
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .config import RunConfig, load_config
    from .data import write_image, write_mask
    from .flowcodec import encode_flows, save_flows
    from .perlinimg import render_perlin_image
    from .synthmask import synthesize_mask

    cfg = load_config(args.config) if args.config else RunConfig()
    ellipse = dataclasses.replace(cfg.ellipse, canvas_size=(args.size, args.size)) if args.size else cfg.ellipse
    out = Path(args.out)
    for sub in ("masks", "images", "flows"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        mask = synthesize_mask(ellipse, cfg.deform, [args.seed, i, 0], cfg.train.min_mask_area)
        img = render_perlin_image(mask, cfg.perlin, (args.seed, i, 1))
        name = f"synth_{i:05d}.tif"
        write_mask(out / "masks" / name, mask)
        write_image(out / "images" / name, img)
        save_flows(out / "flows" / name, encode_flows(mask))
    print(f"wrote {args.n} synthetic triples to {out}")
    return 0


def _train_one(cfg, images, run_dir: Path, resume: bool) -> Path:
    from .engine import Trainer
    last = run_dir / "checkpoints" / "last.ckpt"
    if resume and last.exists():
        trainer = Trainer.from_checkpoint(last, images)
        log.info("resumed %s at step %d", run_dir, trainer.step)
    else:
        trainer = Trainer(cfg, images)
    run_dir.mkdir(parents=True, exist_ok=True)
    from .config import config_to_toml
    try:
        (run_dir / "config.toml").write_text(config_to_toml(cfg))
    except ValueError:
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=str))
    records = trainer.fit(run_dir)
    if records:
        print(f"{run_dir}: {trainer.step} steps, final total loss {records[-1].total:.4f}")
    return run_dir


def cmd_train(args) -> int:
    from .config import RunConfig, load_config
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    images = _training_images(cfg, args.images)
    out = Path(args.out or f"runs/{cfg.hash()}")
    _train_one(cfg, images, out, args.resume)
    return 0


ABLATIONS = {"full": (), "no_adv": ("adv",), "no_perlin": ("perlin",), "no_m2i": ("m2i",)}


def cmd_ablate(args) -> int:
    from .config import RunConfig, load_config
    base = load_config(args.config) if args.config else RunConfig()
    base = _apply_overrides(base, args)
    images = _training_images(base, args.images)
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation variant(s) {unknown}; choose from {sorted(ABLATIONS)}")
    for name in variants:
        for r in range(args.repeats):
            ablation = base.train.ablation.without(ABLATIONS[name])
            train = dataclasses.replace(base.train, ablation=ablation, seed=base.train.seed + r)
            cfg = dataclasses.replace(base, train=train)
            _train_one(cfg, images, Path(args.out) / name / f"seed{train.seed}", args.resume)
    return 0


def cmd_infer(args) -> int:
    from .data import list_images, read_image, write_mask
    from .engine import infer, load_segmenter
    from .flowcodec import DecodeConfig
    net = load_segmenter(args.weights)
    cfg = DecodeConfig(prob_threshold=args.prob_threshold) if args.prob_threshold is not None else DecodeConfig()
    src = Path(args.inp)
    files = list_images(src) if src.is_dir() else [src]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in files:
        labels = infer(read_image(p), net, cfg, tile=args.tile)
        write_mask(out / (p.stem + ".tif"), labels)
        log.info("%s: %d instances", p.name, labels.max())
    print(f"wrote {len(files)} label images to {out}")
    return 0


def cmd_eval(args) -> int:
    from .data import DatasetError, _find_mask, list_images, read_mask
    from .metrics import evaluate, jaccard, jaccard_sweep, match_instances, panoptic_quality
    gt_files = list_images(args.gt)
    if not gt_files:
        raise DatasetError(f"no ground-truth masks in {args.gt}")
    preds, gts, rows = [], [], []
    for g in gt_files:
        gt = read_mask(g)
        pred = read_mask(_find_mask(Path(args.pred), g.name))
        preds.append(pred)
        gts.append(gt)
        sweep = jaccard_sweep(pred, gt)
        r05 = match_instances(pred, gt, 0.5)
        rows.append({"image": g.name, "n_gt": int(len(np.unique(gt)) - (gt == 0).any()),
                     "n_pred": int(len(np.unique(pred)) - (pred == 0).any()),
                     "JAC_0.5": jaccard(r05), "JAC_0.5:0.05:0.95": sweep["jac_mean"],
                     "PQ_0.5": panoptic_quality(r05).pq})
    summary = evaluate(preds, gts, pooled=not args.per_image)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "per_image.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        (out / "metrics.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_select(args) -> int:
    from .engine import export_segmenter, list_checkpoints, select_model
    refs = list_checkpoints(args.runs)
    pairs = _pairs_from_folder(Path(args.val), args.limit)
    best, scores = select_model(refs, pairs, expected_pairs=args.limit)
    report = {"best": str(best.path), "epoch": best.epoch,
              "scores": {str(k): v for k, v in scores.items()}, "n_pairs": len(pairs)}
    out = Path(args.out) if args.out else Path(args.runs) / "best_segmenter.pt"
    export_segmenter(best.path, out)
    report["exported"] = str(out)
    (out.parent / "selection.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_options(p):
    p.add_argument("--config", help="run configuration (TOML or JSON)")
    p.add_argument("--images", help="folder of training images (overrides [data])")
    p.add_argument("--out", help="run directory")
    p.add_argument("--ablate", help="comma-separated loss groups to switch off: adv,perlin,m2i,cyc")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.ckpt")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--epochs-const", type=int)
    p.add_argument("--epochs-decay", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--select-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a subcommand's parser does not reset values given before it
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random stream")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cyclepose", parents=[common],
                                     description="Unsupervised nucleus segmentation via cycle-consistent flows.")
    parser.add_argument("--version", action="version", version=f"cyclepose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic mask/image/flow triples")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, help="canvas side length")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train G, S and the discriminators")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", parents=[common], help="train ablation variants side by side")
    _add_train_options(p)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    p.add_argument("--repeats", type=int, default=1, help="seeds per variant")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", parents=[common], help="segment images with a trained S")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="inp", required=True, help="image file or folder")
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int)
    p.add_argument("--prob-threshold", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predicted label images")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.add_argument("--per-image", action="store_true", help="average per-image scores instead of pooling counts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select", parents=[common], help="pick the best checkpoint on annotated pairs")
    p.add_argument("--runs", required=True)
    p.add_argument("--val", required=True, help="folder with images/ and masks/")
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--out", help="where to write the exported segmenter")
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    from .engine import NonFiniteLossError
    try:
        return args.func(args)
    except (ValueError, OSError, NonFiniteLossError) as exc:
        print(f"cyclepose {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
