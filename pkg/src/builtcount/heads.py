"""Counting heads: DRC, GWAP, CCPP and FusionNet.

All heads consume a frozen backbone feature volume. The attention heads also
take the SS-Net built probability resampled onto the volume's grid and multiply
it into every channel before pooling.

Training runs on cached (volume, probability) pairs, which is exact because
both the backbone and the segmenter stay frozen.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import checkpoint as ckpt
from .backbone import BackboneHandle, extract_volumes, get_backbone
from .dataset import ImageTile, Manifest, augment_counting, iter_tiles
from .ssnet import SSNet, segment_batch, ssnet_from_arrays, ssnet_arrays, ssnet_meta

log = logging.getLogger(__name__)

KINDS = ("DRC", "GWAP", "CCPP", "FUSION")
INPUT_SIZE = 336
HIDDEN = (512, 32)
DROPOUT = 0.6
LEAKY_SLOPE = 0.3


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pooling operators (accept numpy arrays or tensors; batched or single)


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(getattr(x, "values", x), dtype=np.float64)), True


def resample_prob(prob: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear (anti-aliased) resampling of ``(N, H, W)`` probabilities to ``size``."""
    if tuple(prob.shape[-2:]) == tuple(size):
        return prob
    down = prob.shape[-2] > size[0] or prob.shape[-1] > size[1]
    out = F.interpolate(prob.unsqueeze(1), size=size, mode="bilinear", align_corners=False, antialias=down)
    return out.squeeze(1).clamp(0.0, 1.0)


def weight_volume(volume, prob):
    """Channel-wise product of a ``(C, h, w)`` or ``(N, C, h, w)`` volume with the probability grid."""
    v, v_np = _tensor(volume)
    p, _ = _tensor(prob)
    single = v.ndim == 3
    if single:
        v = v.unsqueeze(0)
    if p.ndim == 2:
        p = p.unsqueeze(0)
    p = resample_prob(p.to(v.dtype), tuple(v.shape[-2:]))
    if p.shape[-2:] != v.shape[-2:]:
        raise ValueError(f"probability grid {tuple(p.shape)} does not match volume {tuple(v.shape)}")
    out = v * p.unsqueeze(1)
    out = out[0] if single else out
    return out.numpy() if v_np else out


def gwap(volume, prob):
    """Global weighted average pooling: per-channel mean of the probability-weighted volume."""
    w = weight_volume(volume, prob)
    return w.mean(axis=(-2, -1)) if isinstance(w, np.ndarray) else w.mean(dim=(-2, -1))


def ccpp(weighted, weight, bias=0.0):
    """Cross-channel parametric pooling: a 1x1 convolution to one activation map.

    ``weight`` has one entry per channel (any shape that flattens to ``C``).
    """
    v, v_np = _tensor(weighted)
    w, _ = _tensor(weight)
    b, _ = _tensor(bias)
    w = w.reshape(-1).to(v.dtype)
    c_axis = 0 if v.ndim == 3 else 1
    if w.numel() != v.shape[c_axis]:
        raise ValueError(f"1x1 convolution has {w.numel()} input channels, volume has {v.shape[c_axis]}")
    out = torch.tensordot(w, v.movedim(c_axis, 0), dims=1) + b.reshape(()).to(v.dtype)
    return out.numpy() if v_np else out


# ---------------------------------------------------------------------------
# Modules


class RegressionPipeline(nn.Module):
    """in -> 512 -> 32 -> 1 fully connected regressor with dropout between layers."""

    def __init__(self, in_features: int, activation: str = "leaky", dropout: float = DROPOUT):
        super().__init__()
        self.fc1 = nn.Linear(in_features, HIDDEN[0])
        self.fc2 = nn.Linear(HIDDEN[0], HIDDEN[1])
        self.fc3 = nn.Linear(HIDDEN[1], 1)
        self.activation = activation
        self.drop = nn.Dropout(dropout)

    def act(self, x):
        return F.relu(x) if self.activation == "relu" else F.leaky_relu(x, LEAKY_SLOPE)

    def hidden(self, x):
        """The 512-unit activation consumed by FusionNet."""
        return self.act(self.fc1(x))

    def tail(self, h):
        h = self.drop(h)
        h = self.drop(self.act(self.fc2(h)))
        return self.fc3(h).squeeze(-1)

    def forward(self, x):
        return self.tail(self.hidden(x))


class CountHead(nn.Module):
    """Trainable part of a counting model.

    ``forward(volume, prob)`` takes a batch of feature volumes ``(N, C, h, w)`` and
    probability grids ``(N, h, w)`` (ignored by DRC) and returns raw counts ``(N,)``.
    """

    def __init__(self, kind: str, channels: int, grid: tuple[int, int]):
        super().__init__()
        if kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.channels = channels
        self.grid = tuple(grid)
        if kind in ("DRC", "FUSION"):
            self.drc = RegressionPipeline(channels, "relu")
        if kind in ("GWAP", "FUSION"):
            self.gwap = RegressionPipeline(channels, "leaky")
        if kind in ("CCPP", "FUSION"):
            self.c1 = nn.Conv2d(channels, 1, 1)
            self.ccpp = RegressionPipeline(grid[0] * grid[1], "leaky")
        if kind == "FUSION":
            self.fusion = RegressionPipeline(3 * HIDDEN[0], "leaky")

    def ccpp_map(self, volume, prob):
        return ccpp(weight_volume(volume, prob), self.c1.weight, self.c1.bias)

    def stream_hidden(self, volume, prob) -> dict[str, torch.Tensor]:
        out = {}
        if hasattr(self, "drc"):
            out["drc"] = self.drc.hidden(volume.mean(dim=(-2, -1)))
        if hasattr(self, "gwap"):
            out["gwap"] = self.gwap.hidden(gwap(volume, prob))
        if hasattr(self, "ccpp"):
            out["ccpp"] = self.ccpp.hidden(self.ccpp_map(volume, prob).flatten(1))
        return out

    def fused(self, volume, prob) -> torch.Tensor:
        s = self.stream_hidden(volume, prob)
        return torch.cat([s["drc"], s["gwap"], s["ccpp"]], dim=1)

    def forward(self, volume, prob=None):
        if self.kind != "DRC" and prob is None:
            raise ConfigurationError(f"{self.kind} needs a probability map")
        if self.kind == "DRC":
            return self.drc(volume.mean(dim=(-2, -1)))
        if self.kind == "GWAP":
            return self.gwap(gwap(volume, prob))
        if self.kind == "CCPP":
            return self.ccpp(self.ccpp_map(volume, prob).flatten(1))
        return self.fusion(self.fused(volume, prob))

    def warm_start(self, drc=None, gwap_head=None, ccpp_head=None):
        """Copy stream parameters from separately trained single-stream heads."""
        with torch.no_grad():
            if drc is not None:
                self.drc.load_state_dict(drc.drc.state_dict())
            if gwap_head is not None:
                self.gwap.load_state_dict(gwap_head.gwap.state_dict())
            if ccpp_head is not None:
                self.ccpp.load_state_dict(ccpp_head.ccpp.state_dict())
                self.c1.load_state_dict(ccpp_head.c1.state_dict())


class Prediction(NamedTuple):
    raw: float
    count: int


def clamp_count(raw: float) -> int:
    return max(0, int(round(raw)))


@dataclass(eq=False)
class CountModel:
    kind: str
    backbone: BackboneHandle
    head: CountHead
    ssnet: Optional[SSNet] = None
    ssnet_ref: Optional[str] = None
    input_size: int = INPUT_SIZE
    config: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.kind == "DRC" and self.ssnet is not None:
            raise ConfigurationError("DRC does not use an SS-Net")
        if self.kind != "DRC" and self.ssnet is None:
            raise ConfigurationError(f"{self.kind} requires an SS-Net")


def build_model(kind: str, backbone: BackboneHandle, ssnet: Optional[SSNet] = None,
                input_size: int = INPUT_SIZE, seed: int = 0) -> CountModel:
    kind = kind.upper()
    if kind == "DRC":
        ssnet = None
    elif ssnet is None:
        raise ConfigurationError(f"{kind} requires an SS-Net (--ssnet)")
    grid = backbone.volume_size(input_size, input_size)
    torch.manual_seed(seed)
    head = CountHead(kind, backbone.channels, grid)
    return CountModel(kind, backbone, head, ssnet, input_size=input_size)


# ---------------------------------------------------------------------------
# Feature computation


def resize_pixels(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[:2] == (size, size):
        return pixels
    return np.asarray(Image.fromarray(pixels).resize((size, size), Image.BILINEAR))


@dataclass(eq=False)
class FeatureSet:
    volumes: np.ndarray  # (N, C, h, w) float32
    probs: np.ndarray  # (N, h, w) float32
    counts: np.ndarray  # (N,) float
    ids: tuple

    def __len__(self):
        return len(self.counts)


def compute_features(backbone: BackboneHandle, ssnet: Optional[SSNet], pixels: np.ndarray,
                     batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Backbone volumes and probability grids for a uint8 batch of equal-size images."""
    volumes = extract_volumes(backbone, pixels, batch_size)
    grid = volumes.shape[-2:]
    if ssnet is None:
        probs = np.ones((len(pixels),) + grid, np.float32)
    else:
        full = segment_batch(ssnet, pixels, batch_size)
        probs = resample_prob(torch.from_numpy(full).float(), grid).numpy()
    return volumes.astype(np.float32), probs.astype(np.float32)


def tile_features(backbone: BackboneHandle, ssnet: Optional[SSNet], tiles: Sequence[ImageTile],
                  augment: bool = False, input_size: int = INPUT_SIZE, chunk: int = 64) -> FeatureSet:
    vols, probs, counts, ids = [], [], [], []
    buf: list[ImageTile] = []

    def flush():
        if not buf:
            return
        px = np.stack([resize_pixels(t.pixels, input_size) for t in buf])
        v, p = compute_features(backbone, ssnet, px)
        vols.append(v)
        probs.append(p)
        buf.clear()

    for tile in tiles:
        for t in (augment_counting(tile) if augment else [tile]):
            buf.append(t)
            counts.append(t.count)
            ids.append(t.id)
            if len(buf) >= chunk:
                flush()
    flush()
    if not counts:
        raise ValueError("no tiles to featurise")
    return FeatureSet(np.concatenate(vols), np.concatenate(probs), np.array(counts, np.float64), tuple(ids))


def manifest_features(model: CountModel, manifest: Manifest, augment: bool = False) -> FeatureSet:
    return tile_features(model.backbone, model.ssnet, iter_tiles(manifest), augment, model.input_size)


# ---------------------------------------------------------------------------
# Inference


def forward(model: CountModel, image, mode: str = "infer"):
    """Raw count for one image. ``mode="train"`` keeps dropout active and returns a tensor."""
    pixels = image.pixels if isinstance(image, ImageTile) else np.asarray(image)
    px = resize_pixels(pixels, model.input_size)[None]
    v, p = compute_features(model.backbone, model.ssnet, px)
    vt, pt = torch.from_numpy(v), torch.from_numpy(p)
    if mode == "train":
        model.head.train()
        return model.head(vt, pt)[0]
    if mode != "infer":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    model.head.eval()
    with torch.no_grad():
        return float(model.head(vt, pt)[0])


def predict(model: CountModel, image) -> Prediction:
    raw = forward(model, image, "infer")
    return Prediction(raw, clamp_count(raw))


def predict_features(head: CountHead, feats: FeatureSet, batch_size: int = 256) -> np.ndarray:
    head.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(feats), batch_size):
            v = torch.from_numpy(feats.volumes[i:i + batch_size])
            p = torch.from_numpy(feats.probs[i:i + batch_size])
            out.append(head(v, p).double().numpy())
    return np.concatenate(out)


def predict_pixels(model: CountModel, pixels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Raw counts for a uint8 batch ``(N, H, W, 3)``."""
    px = np.stack([resize_pixels(p, model.input_size) for p in pixels])
    v, p = compute_features(model.backbone, model.ssnet, px, batch_size)
    return predict_features(model.head, FeatureSet(v, p, np.zeros(len(px)), ()))


# ---------------------------------------------------------------------------
# Training


@dataclass
class CounterTrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    patience: int = 10
    augment: bool = True
    seed: int = 0
    warm_start: bool = False  # FusionNet: copy streams from trained single-stream heads


def batch_loss(kind: str, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE for DRC, per-batch RMSE for the attention heads."""
    mse = F.mse_loss(pred, target)
    return mse if kind == "DRC" else torch.sqrt(mse)


def _mae(head, feats):
    if feats is None or len(feats) == 0:
        return float("nan")
    return float(np.mean(np.abs(predict_features(head, feats) - feats.counts)))


def train_head(head: CountHead, train: FeatureSet, val: Optional[FeatureSet] = None,
               config: CounterTrainConfig = CounterTrainConfig()) -> tuple[CountHead, dict, dict]:
    """Adam on cached features, early stopping on validation MAE; restores the best epoch.

    Returns the head, the loss history and the optimizer state.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(head.parameters(), lr=config.lr)
    vols = torch.from_numpy(train.volumes)
    probs = torch.from_numpy(train.probs)
    counts = torch.from_numpy(train.counts).float()
    hist = {"train_loss": [], "val_loss": [], "val_mae": [], "best_epoch": 0, "seconds": 0.0}
    best, best_state, stale = math.inf, copy.deepcopy(head.state_dict()), 0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        head.train()
        order = torch.from_numpy(rng.permutation(len(train)))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            pred = head(vols[idx], probs[idx])
            loss = batch_loss(head.kind, pred, counts[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite {head.kind} loss at epoch {epoch}, batch {i // config.batch_size}: "
                    f"pred range [{pred.min().item():.3g}, {pred.max().item():.3g}]")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        hist["train_loss"].append(total / len(train))
        if val is not None and len(val):
            pv = predict_features(head, val)
            vloss = float(batch_loss(head.kind, torch.from_numpy(pv), torch.from_numpy(val.counts)))
            mae = float(np.mean(np.abs(pv - val.counts)))
            hist["val_loss"].append(vloss)
            hist["val_mae"].append(mae)
            if mae < best:
                best, best_state, stale, hist["best_epoch"] = mae, copy.deepcopy(head.state_dict()), 0, epoch
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("%s: early stop at epoch %d (best %d, val MAE %.3f)",
                             head.kind, epoch, hist["best_epoch"], best)
                    break
        else:
            best_state, hist["best_epoch"] = copy.deepcopy(head.state_dict()), epoch
    head.load_state_dict(best_state)
    head.eval()
    hist["seconds"] = time.perf_counter() - t0
    hist["optimizer"] = {"name": "adam", "lr": config.lr}
    return head, hist, opt.state_dict()


def train_counter(model: CountModel, train: Manifest, val: Optional[Manifest] = None,
                  config: CounterTrainConfig = CounterTrainConfig(), *,
                  train_features: Optional[FeatureSet] = None,
                  val_features: Optional[FeatureSet] = None) -> tuple[CountModel, dict]:
    """Train the head of ``model`` with the backbone and SS-Net frozen.

    Precomputed feature sets may be passed to skip feature extraction.
    """
    if train_features is None:
        if len(train) == 0:
            raise ValueError("empty training manifest")
        train_features = manifest_features(model, train, augment=config.augment)
    if val_features is None and val is not None and len(val):
        val_features = manifest_features(model, val)
    head, hist, opt_state = train_head(model.head, train_features, val_features, config)
    model.head = head
    model.config = asdict(config)
    model.history = hist
    model.optimizer_state = opt_state
    return model, hist


# ---------------------------------------------------------------------------
# Checkpoints


def _optimizer_arrays(state: dict) -> tuple[dict, dict]:
    arrays = {}
    for pid, st in state.get("state", {}).items():
        for name, val in st.items():
            arrays[f"{pid}/{name}"] = np.asarray(val.detach().cpu().numpy() if torch.is_tensor(val) else val)
    return arrays, {"param_groups": state.get("param_groups", [])}


def _optimizer_state(arrays: dict, meta: dict) -> dict:
    state: dict = {}
    for key, val in arrays.items():
        pid, name = key.split("/", 1)
        state.setdefault(int(pid), {})[name] = torch.from_numpy(np.array(val))
    return {"state": state, "param_groups": meta.get("param_groups", [])}


def save_model(model: CountModel, path) -> None:
    arrays = ckpt.with_prefix({k: v.detach().numpy() for k, v in model.head.state_dict().items()}, "head")
    meta = {
        "kind": "counter",
        "model_kind": model.kind,
        "backbone": model.backbone.descriptor,
        "channels": model.head.channels,
        "grid": list(model.head.grid),
        "input_size": model.input_size,
        "ssnet_ref": model.ssnet_ref,
        "config": model.config,
        "history": model.history,
    }
    if model.backbone.descriptor.startswith("tiny-cnn"):
        arrays.update(ckpt.with_prefix(model.backbone.parameter_arrays(), "backbone"))
    if model.ssnet is not None:
        meta["ssnet"] = ssnet_meta(model.ssnet)
        arrays.update(ckpt.with_prefix(ssnet_arrays(model.ssnet), "ssnet"))
    if model.optimizer_state is not None:
        opt_arrays, opt_meta = _optimizer_arrays(model.optimizer_state)
        meta["optimizer"] = {"name": "adam", **opt_meta}
        arrays.update(ckpt.with_prefix(opt_arrays, "optim"))
    ckpt.save_container(path, meta, arrays)


def load_model(path) -> CountModel:
    meta, arrays = ckpt.load_container(path)
    if meta.get("kind") != "counter":
        raise ckpt.CheckpointError(f"{path} is a {meta.get('kind')!r} checkpoint, not a counting model")
    backbone = get_backbone(meta["backbone"])
    bb = ckpt.prefixed(arrays, "backbone")
    if bb:
        backbone.module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in bb.items()})
        backbone.freeze()
    ssnet = None
    if meta.get("ssnet"):
        ssnet = ssnet_from_arrays(meta["ssnet"], ckpt.prefixed(arrays, "ssnet"))
    elif meta.get("ssnet_ref"):
        from .ssnet import load_ssnet
        ssnet = load_ssnet(meta["ssnet_ref"])
    head = CountHead(meta["model_kind"], meta["channels"], tuple(meta["grid"]))
    head.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.prefixed(arrays, "head").items()})
    head.eval()
    opt = None
    if "optimizer" in meta:
        opt = _optimizer_state(ckpt.prefixed(arrays, "optim"), meta["optimizer"])
    return CountModel(meta["model_kind"], backbone, head, ssnet, meta.get("ssnet_ref"),
                      meta.get("input_size", INPUT_SIZE), meta.get("config", {}), meta.get("history", {}), opt)
