"""Counting built structures in overhead RGB imagery with attention-based re-weighting."""

__version__ = "0.1.0"

from .dataset import (BANDS, HIGH, LOW, MEDIUM, CountBand, ImageTile, Manifest, ManifestEntry,
                      augment_counting, augment_patch, band_of, built_up_ratio, load_manifest,
                      tile_extent_meters, write_manifest)
from .metrics import EvalReport, band_report, evaluate
from .ssnet import (MiningState, ProbabilityMap, SSNet, SSNetArch, crop_label, mine_hard_negatives, output_size,
                    patch_label,
                    segment, segmentation_metrics, train_ssnet)
from .synthgen import SceneSpec, generate_corpus, generate_scene
from .backbone import (BackboneHandle, FeatureVolume, extract_pooled, extract_volume, get_backbone,
                       tiny_backbone)
from .heads import (CountHead, CountModel, build_model, ccpp, forward, gwap, load_model, predict,
                    save_model, train_counter)
from .grid import CellGrid, count_tile, render_heatmap
