"""Library walkthrough on a small synthetic corpus.

Generates scenes, trains a built-up segmenter, trains a plain and an attention
counter on cached features, evaluates both, then counts a stitched 3x3 tile and
renders the heatmap. Runs in a few minutes on one CPU core.

    python3 demos/walkthrough.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
import torch

from builtcount.backbone import tiny_backbone
from builtcount.dataset import iter_tiles
from builtcount.grid import count_tile, render_heatmap
from builtcount.heads import CounterTrainConfig, build_model, predict_features, tile_features, train_head
from builtcount.metrics import band_report, evaluate
from builtcount.ssnet import SSNetArch, SSNetTrainConfig, sample_patches, segment, segmentation_metrics, train_ssnet
from builtcount.synthgen import generate_corpus

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# 1. synthetic scenes with exact counts and masks
train_m = generate_corpus(240, (0, 60), 7, out / "train", split="train", id_prefix="tr")
test_m = generate_corpus(40, (0, 60), 8, out / "test", split="test", id_prefix="te")
train_tiles, test_tiles = list(iter_tiles(train_m)), list(iter_tiles(test_m))
print(f"corpus: {len(train_tiles)} train, {len(test_tiles)} test scenes")

# 2. built-up segmenter on 64 px patches with hard-negative mining
patches = sample_patches(train_tiles[:120], 4, seed=0)
candidates = sample_patches(train_tiles[120:], 4, size=128, seed=1, label=0)
cfg = SSNetTrainConfig(epochs=6, mining_interval=3, lr=1e-2, arch=SSNetArch(width_mult=0.125))
ssnet, hist = train_ssnet(patches, cfg, candidates=candidates)
print(f"ssnet: loss {hist.initial_loss:.3f} -> {hist.loss[-1]:.3f}, mined pool {hist.pool_sizes}")

prob = segment(ssnet, test_tiles[0])
p, r = segmentation_metrics(prob.values, test_tiles[0].mask)
prob.save_png(out / "probability.png")
print(f"segment {test_tiles[0].id}: precision {p:.2f} recall {r:.2f} -> {out / 'probability.png'}")

# 3. counters on cached features (backbone and segmenter stay frozen)
backbone = tiny_backbone(0)
tr_feats = tile_features(backbone, ssnet, train_tiles, augment=True)
te_feats = tile_features(backbone, ssnet, test_tiles)
models = {}
for kind in ("DRC", "GWAP"):
    model = build_model(kind, backbone, ssnet, seed=0)
    model.head, _, _ = train_head(model.head, tr_feats, None, CounterTrainConfig(epochs=15, lr=1e-3))
    raw = predict_features(model.head, te_feats)
    report = evaluate(list(zip(te_feats.counts.tolist(), raw.tolist())))
    print(f"\n{kind}\n{band_report(report)}")
    models[kind] = model

# 4. a 1008 x 1008 tile stitched from nine test scenes, counted cell by cell
scenes = test_tiles[:9]
big = np.concatenate([np.concatenate([t.pixels for t in scenes[r * 3:r * 3 + 3]], axis=1) for r in range(3)])
grid = count_tile(models["GWAP"], big)
grid = grid.with_truths({(i // 3, i % 3): t.count for i, t in enumerate(scenes)})
paths = render_heatmap(grid, out=out / "heatmap.png", image=big)
print(f"\ntile: predicted {grid.predicted_total}, true {grid.truth_total}, heatmap -> {paths['heatmap']}")
