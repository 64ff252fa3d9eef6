"""Command-line pipeline: generate data, pretrain, extract, classify,
export attention maps, and print cost reports."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import complexity as cx
from . import mil
from . import model as mdl
from .autodiff import no_grad
from .checkpoint import load_checkpoint
from .config import get_config
from .dino import SSLConfig, pretrain, save_pretrain_checkpoint
from .errors import CdvitError, IntegrityError
from .extract import extract_features, load_backbone, read_labels
from .netpbm import write_pgm
from .pyramid import generate_dataset, load_pair, read_manifest

DEFAULT_SEED = 1234


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help="RNG seed (default %(default)s)")
    p.add_argument("--preset", default="toy", choices=("toy", "reference"),
                   help="architecture preset (default %(default)s)")
    p.add_argument("--config", default=None, metavar="FILE",
                   help="custom key=value architecture config; overrides --preset")


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(out, count_per_class=args.count, seed=args.seed,
                                size_l=args.size_l, mag_ratio=args.mag_ratio,
                                patch_px=args.patch_px)
    n = len(read_manifest(manifest))
    print(f"wrote {manifest} ({2 * args.count} slides, {n} pairs)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = get_config(args.preset, args.config)
    ssl = SSLConfig(epochs=args.epochs, batch_size=args.batch_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = pretrain(args.manifest, cfg, ssl, seed=args.seed, arch=args.arch,
                      log_path=f"{out}.log", progress=not args.quiet)
    save_pretrain_checkpoint(out, result, meta={"seed": args.seed})
    print(f"wrote {out} (final epoch loss {result.epoch_loss[-1]:.4f}, "
          f"loss log {out}.log)")
    return 0


def cmd_extract(args) -> int:
    result = extract_features(args.manifest, args.checkpoint, args.out,
                              batch_size=args.batch_size, which=args.which)
    print(f"wrote {len(result.slide_ids)} feature files (dim {result.feat_dim}) "
          f"to {result.feature_dir}; {len(result.skipped)} slides skipped")
    return 0


def cmd_mil(args) -> int:
    labels = read_labels(args.labels)
    bags = mil.load_bags(args.features, labels)
    by_id = {b.slide_id: b for b in bags}
    train_ids, val_ids, test_ids = mil.stratified_split(
        {b.slide_id: b.label for b in bags}, seed=args.seed)
    result = mil.train_mil([by_id[s] for s in train_ids],
                           [by_id[s] for s in val_ids],
                           mil.MILHyper(epochs=args.epochs, seed=args.seed))
    test_bags = [by_id[s] for s in test_ids]
    accuracy, auc = mil.evaluate(test_bags, result.params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mil.write_predictions(out / "predictions.tsv", test_bags, result.params)
    auc_text = "undefined" if auc is None else f"{auc:.4f}"
    (out / "metrics.txt").write_text(
        f"accuracy\t{accuracy:.4f}\nauc\t{auc_text}\n"
        f"best_epoch\t{result.best_epoch + 1}\n", encoding="utf-8")
    print(f"test accuracy {accuracy:.4f}, AUC {auc_text} "
          f"({len(train_ids)}/{len(val_ids)}/{len(test_ids)} slides)")
    return 0


def cmd_attention(args) -> int:
    entries = {e.pair_id: e for e in read_manifest(args.manifest)}
    if args.pair_id not in entries:
        raise IntegrityError(f"pair {args.pair_id!r} not found in {args.manifest}")
    pair = load_pair(args.manifest, entries[args.pair_id])
    params, cfg, arch = load_backbone(args.checkpoint, which=args.which)
    ctx = pair.context_img[None]
    with no_grad():
        if arch == "cd":
            _, record = mdl.cd_forward(params, cfg, ctx, pair.detail_img[None])
        else:
            _, record = mdl.vit_forward(params, cfg, ctx)
    field = mdl.attention_map(record, args.layer)
    scale = cfg.ctx_patch
    img = np.repeat(np.repeat(field, scale, axis=0), scale, axis=1)
    write_pgm(args.out, np.rint(img * 255).astype(np.uint8))
    print(f"wrote {args.out} ({field.shape[0]}x{field.shape[1]} map "
          f"upsampled to {img.shape[0]}x{img.shape[1]})")
    return 0


def cmd_complexity(args) -> int:
    cfg = get_config(args.preset, args.config)
    reports = cx.standard_reports(cfg)
    print(cx.render_table(reports))
    frac, dec = cx.speedup(reports[1], reports[2])
    print(f"\nper-block attention cost reduced {dec:.2f}x "
          f"({frac}) vs the detail-resolution ViT")
    if args.out:
        Path(args.out).write_text(cx.render_records(reports), encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdvit",
        description="Multi-resolution context/detail transformer pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render and tile synthetic slides")
    _add_common(p)
    p.add_argument("--count", type=int, default=25, help="slides per class")
    p.add_argument("--size-l", type=int, default=192,
                   help="low-resolution slide side in pixels")
    p.add_argument("--mag-ratio", type=int, default=4)
    p.add_argument("--patch-px", type=int, default=64,
                   help="context patch size; must match the model preset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", default="cd", choices=("cd", "vit"),
                   help="joint model or context-only baseline")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="write frozen per-slide features")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--which", default="teacher", choices=("teacher", "student"))
    p.add_argument("--out", required=True, help="feature directory")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("mil", help="train and evaluate the bag classifier")
    _add_common(p)
    p.add_argument("--features", required=True, help="feature directory")
    p.add_argument("--labels", required=True, help="labels.tsv path")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_mil)

    p = sub.add_parser("attention", help="export a CLS attention map")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair-id", required=True)
    p.add_argument("--layer", type=int, default=-1,
                   help="1-based block index; -1 for the last block")
    p.add_argument("--which", default="teacher", choices=("teacher", "student"))
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("complexity", help="token and attention-cost report")
    _add_common(p)
    p.add_argument("--out", default=None, help="optional records file")
    p.set_defaults(func=cmd_complexity)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "layer", None) == -1:
        header, _ = load_checkpoint(args.checkpoint)
        args.layer = int(header["config"]["depth"])
    try:
        return args.func(args)
    except CdvitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())