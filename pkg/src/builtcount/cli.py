"""Command-line entry point: ``builtcount <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("builtcount")


def _snapshot(args: argparse.Namespace, path: Path) -> Path:
    """Write the resolved arguments and seed beside an output."""
    doc = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc["builtcount_version"] = __version__
    doc["python"] = platform.python_version()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _beside(out: Path) -> Path:
    return out.with_name(out.name + ".config.json") if out.suffix else out / "run_config.json"


def _load_image(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------------------


def cmd_synth(args):
    from .synthgen import generate_corpus
    m = generate_corpus(args.n, (args.min_count, args.max_count), args.seed, args.out,
                        size_px=args.size, split=args.split, id_prefix=args.prefix,
                        adjacency_prob=args.adjacency)
    _snapshot(args, _beside(Path(args.out)))
    print(f"wrote {len(m)} scenes and {Path(args.out) / 'manifest.tsv'}")


def cmd_validate(args):
    from .dataset import load_manifest
    m = load_manifest(args.manifest)
    by_split = {s: len(m.split(s)) for s in ("train", "val", "test")}
    print(f"{args.manifest}: {len(m)} entries ({', '.join(f'{k}={v}' for k, v in by_split.items())})")


def cmd_train_ssnet(args):
    import torch
    from .dataset import iter_tiles, load_manifest
    from .ssnet import (SSNetArch, SSNetTrainConfig, load_vgg16_trunk, sample_patches,
                        save_ssnet, train_ssnet)
    torch.manual_seed(args.seed)
    manifest = load_manifest(args.manifest).split(args.split)
    tiles = list(iter_tiles(manifest))
    if not tiles:
        raise ValueError(f"no {args.split} entries in {args.manifest}")
    patches = sample_patches(tiles, args.patches_per_tile, seed=args.seed)
    candidates = sample_patches(tiles, args.candidates_per_tile, size=args.candidate_size,
                                seed=args.seed + 1, label=0)
    arch = SSNetArch(width_mult=args.width_mult, padding=args.padding)
    config = SSNetTrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                              mining_interval=args.mining_interval, seed=args.seed, arch=arch)
    init = None
    if args.pretrained:
        init = load_vgg16_trunk
    model, hist = train_ssnet(patches, config, candidates=candidates, init=init,
                              on_epoch=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    out = Path(args.out)
    save_ssnet(model, out, extra={"loss": hist.loss, "mining_epochs": hist.mining_epochs,
                                  "pool_sizes": hist.pool_sizes})
    _snapshot(args, _beside(out))
    print(f"saved SS-Net to {out}; final loss {hist.loss[-1]:.4f}, {hist.state.rounds} mining rounds")


def cmd_train_counter(args):
    from .backbone import get_backbone
    from .dataset import load_manifest
    from .heads import CounterTrainConfig, build_model, load_model, save_model, train_counter
    from .ssnet import load_ssnet
    kind = args.kind.upper()
    if kind != "DRC" and not args.ssnet:
        raise ConfigError(f"--kind {args.kind} requires --ssnet")
    manifest = load_manifest(args.manifest)
    ssnet = load_ssnet(args.ssnet) if args.ssnet and kind != "DRC" else None
    model = build_model(kind, get_backbone(args.backbone), ssnet, seed=args.seed)
    model.ssnet_ref = args.ssnet if ssnet is not None else None
    if args.warm_start:
        if kind != "FUSION":
            raise ConfigError("--warm-start applies to --kind fusion only")
        streams = {m.kind: m.head for m in (load_model(p) for p in args.warm_start)}
        model.head.warm_start(streams.get("DRC"), streams.get("GWAP"), streams.get("CCPP"))
    config = CounterTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                                patience=args.patience, augment=not args.no_augment, seed=args.seed,
                                warm_start=bool(args.warm_start))
    model, hist = train_counter(model, manifest.split("train"), manifest.split("val"), config)
    out = Path(args.out)
    save_model(model, out)
    _snapshot(args, _beside(out))
    best = hist["val_mae"][hist["best_epoch"] - 1] if hist["val_mae"] else float("nan")
    print(f"saved {kind} model to {out}; best epoch {hist['best_epoch']}, val MAE {best:.3f}")


def cmd_eval(args):
    from .dataset import load_manifest
    from .heads import load_model, manifest_features, predict_features
    from .metrics import band_report, evaluate, write_report
    model = load_model(args.model)
    manifest = load_manifest(args.manifest)
    if args.split:
        manifest = manifest.split(args.split)
    if len(manifest) == 0:
        raise ValueError("no entries to evaluate")
    feats = manifest_features(model, manifest)
    preds = predict_features(model.head, feats)
    pairs = list(zip(feats.counts.astype(int), preds))
    out = Path(args.out)
    raw = evaluate(pairs, ids=feats.ids)
    write_report(raw, out, "eval")
    write_report(evaluate(pairs, ids=feats.ids, rounded=True), out, "eval_rounded")
    _snapshot(args, out / "run_config.json")
    print(band_report(raw))


def cmd_segment(args):
    from .ssnet import load_ssnet, segment
    model = load_ssnet(args.model)
    pm = segment(model, _load_image(args.image))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pm.save_png(out)
    if args.npy:
        pm.save_npy(out.with_suffix(".npy"))
    _snapshot(args, _beside(out))
    print(f"wrote {out} ({pm.values.shape[0]}x{pm.values.shape[1]}, native {pm.native.shape})")


def cmd_count_tile(args):
    from .grid import count_tile, read_truth_table, write_cell_table
    from .heads import load_model
    model = load_model(args.model)
    truths = read_truth_table(args.truth) if args.truth else None
    grid = count_tile(model, _load_image(args.image), args.cell, workers=args.workers, truths=truths)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cell_table(grid, out)
    _snapshot(args, _beside(out))
    rows, cols = grid.shape
    msg = f"{rows}x{cols} = {len(grid.cells)} cells, predicted total {grid.predicted_total}"
    if grid.truth_total is not None:
        msg += f", truth total {grid.truth_total}"
    print(msg)


def cmd_render(args):
    from .grid import DEFAULT_BINS, parse_bins, read_cell_table, read_truth_table, render_heatmap
    grid = read_cell_table(args.cells)
    if args.truth:
        grid = grid.with_truths(read_truth_table(args.truth))
    bins = parse_bins(args.bins) if args.bins else DEFAULT_BINS
    image = _load_image(args.image) if args.image else None
    paths = render_heatmap(grid, bins, args.out, image=image, alpha=args.alpha)
    _snapshot(args, _beside(Path(args.out)))
    print("wrote " + ", ".join(str(p) for p in paths.values()))


class ConfigError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="builtcount", description="Built-structure counting in overhead imagery.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus with exact counts and masks")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--min-count", type=int, default=0)
    s.add_argument("--max-count", type=int, default=80)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=336)
    s.add_argument("--split", choices=("train", "val", "test"), help="force every row into one split")
    s.add_argument("--prefix", default="syn", help="id prefix")
    s.add_argument("--adjacency", type=float, default=0.3, help="shared-wall probability in dense scenes")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("validate-manifest", help="parse and check a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("train-ssnet", help="train the built-up segmenter on masked tiles")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--epochs", type=int, default=45)
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--mining-interval", type=int, default=15)
    s.add_argument("--patches-per-tile", type=int, default=8)
    s.add_argument("--candidates-per-tile", type=int, default=2)
    s.add_argument("--candidate-size", type=int, default=128)
    s.add_argument("--width-mult", type=float, default=1.0)
    s.add_argument("--padding", choices=("same", "valid"), default="same")
    s.add_argument("--pretrained", action="store_true", help="initialise the trunk from ImageNet VGG-16")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_ssnet)

    s = sub.add_parser("train-counter", help="train a DRC, GWAP, CCPP or FusionNet head")
    s.add_argument("--kind", required=True, type=str.lower, choices=("drc", "gwap", "ccpp", "fusion"))
    s.add_argument("--manifest", required=True, help="manifest with train and val rows")
    s.add_argument("--out", required=True)
    s.add_argument("--ssnet", help="SS-Net checkpoint (required for attention kinds)")
    s.add_argument("--backbone", default="tiny-cnn:seed=0", help="tiny-cnn:seed=N or densenet121[:imagenet]")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--warm-start", nargs="+", metavar="CKPT", help="FusionNet: trained stream checkpoints")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_counter)

    s = sub.add_parser("eval", help="evaluate a counting model on a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), help="restrict to one split")
    s.add_argument("--out", default="eval_out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="write the built probability map of an image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, help="8-bit PNG output")
    s.add_argument("--npy", action="store_true", help="also write float probabilities as .npy")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("count-tile", help="count a large image cell by cell")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--cell", type=int, default=336)
    s.add_argument("--out", default="cells.tsv")
    s.add_argument("--truth", help="row/col/truth table")
    s.add_argument("--workers", type=int, default=1, help="parallel cell batches; output order is fixed")
    s.set_defaults(func=cmd_count_tile)

    s = sub.add_parser("render", help="render a cell table as a heatmap")
    s.add_argument("--cells", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--image", help="image to draw the overlay on")
    s.add_argument("--truth", help="row/col/truth table")
    s.add_argument("--bins", help='count bins, e.g. "0,1-10,11-20,21-30,31-40,>40"')
    s.add_argument("--alpha", type=float, default=0.45)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 2, --help and --version exit 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # one-line diagnostic, no traceback
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
