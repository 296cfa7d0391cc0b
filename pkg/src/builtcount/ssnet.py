"""Fully convolutional built-up segmenter (SS-Net).

The trunk is the first three convolutional blocks of VGG-16 (2, 2 and 3 3x3
convolutions followed by a 2x2 stride-2 max pool). An unpadded KxK convolution
and a 1x1 convolution turn the stride-8 trunk features into a two-channel
built / non-built score per 64x64 window. Softmax over the two channels gives
the probability pair.

Two padding regimes are supported. ``"same"`` pads trunk convolutions by one
pixel and uses K=8 for the first head layer, so a 224 px image yields a
21x21x2 map. ``"valid"`` leaves the trunk unpadded and derives K so that a
64 px patch still maps to one decision; in that regime full-image inference
is exactly the sliding-window evaluation of 64x64 crops at stride 8.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .dataset import ImageTile, patch_augmentations

log = logging.getLogger(__name__)

PATCH = 64
STRIDE = 8
VGG_BLOCKS = ((64, 2), (128, 2), (256, 3))


class SizeError(ValueError):
    pass


def output_size(n_in: int, P: int, K: int, S: int) -> int:
    """Spatial output size of a convolution or pooling layer."""
    if S < 1:
        raise ValueError("stride must be >= 1")
    if n_in + 2 * P < K:
        raise SizeError(f"kernel {K} larger than padded input {n_in}+2*{P}")
    return (n_in + 2 * P - K) // S + 1


@dataclass(frozen=True)
class SSNetArch:
    width_mult: float = 1.0
    head_channels: int = 512
    padding: str = "same"

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(c * self.width_mult))) for c, _ in VGG_BLOCKS)

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.head_channels * self.width_mult)))

    @property
    def conv_pad(self) -> int:
        return 1 if self.padding == "same" else 0

    def trunk_layers(self) -> list[tuple[str, int, int, int]]:
        """(kind, K, S, P) for every spatial layer of the trunk."""
        layers = []
        for _, n in VGG_BLOCKS:
            layers += [("conv", 3, 1, self.conv_pad)] * n
            layers.append(("pool", 2, 2, 0))
        return layers

    @property
    def head_kernel(self) -> int:
        if self.padding == "same":
            return 8
        n = PATCH
        for _, K, S, P in self.trunk_layers():
            n = output_size(n, P, K, S)
        return n

    def layers(self) -> list[tuple[str, int, int, int]]:
        return self.trunk_layers() + [("head", self.head_kernel, 1, 0), ("score", 1, 1, 0)]

    def spatial_sizes(self, n_in: int) -> list[int]:
        sizes = []
        n = n_in
        for _, K, S, P in self.layers():
            n = output_size(n, P, K, S)
            sizes.append(n)
        return sizes

    def native_shape(self, height: int, width: int) -> tuple[int, int, int]:
        return (self.spatial_sizes(height)[-1], self.spatial_sizes(width)[-1], 2)

    def min_input(self) -> int:
        n = 1
        while True:
            try:
                if self.spatial_sizes(n)[-1] >= 1:
                    return n
            except SizeError:
                pass
            n += 1


class SSNet(nn.Module):
    """Patch classifier that doubles as a fully convolutional segmenter.

    Inputs are float tensors ``(N, 3, H, W)`` in [0, 1]; the stored training-set
    channel mean is subtracted inside :meth:`forward`.
    """

    def __init__(self, arch: SSNetArch = SSNetArch()):
        super().__init__()
        self.arch = arch
        layers: list[nn.Module] = []
        c_in = 3
        for c_out, (_, n) in zip(arch.widths, VGG_BLOCKS):
            for _ in range(n):
                layers += [nn.Conv2d(c_in, c_out, 3, padding=arch.conv_pad), nn.ReLU(inplace=True)]
                c_in = c_out
            layers.append(nn.MaxPool2d(2, 2))
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Conv2d(c_in, arch.hidden, arch.head_kernel), nn.ReLU(inplace=True),
            nn.Conv2d(arch.hidden, 2, 1))
        self.register_buffer("mean", torch.zeros(3))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.check_shapes(PATCH, PATCH)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x - self.mean.to(x.dtype).view(1, 3, 1, 1)
        return self.head(self.trunk(x))

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(x), dim=1)

    def spatial_modules(self) -> list[nn.Module]:
        mods = [m for m in self.trunk if isinstance(m, (nn.Conv2d, nn.MaxPool2d))]
        return mods + [m for m in self.head if isinstance(m, nn.Conv2d)]

    def check_shapes(self, height: int, width: int) -> list[tuple[int, ...]]:
        """Run a forward pass and assert every layer's spatial size matches the size equation."""
        expect_h = self.arch.spatial_sizes(height)
        expect_w = self.arch.spatial_sizes(width)
        seen: list[tuple[int, ...]] = []
        hooks = [m.register_forward_hook(lambda _m, _i, out: seen.append(tuple(out.shape)))
                 for m in self.spatial_modules()]
        try:
            with torch.no_grad():
                p = next(self.parameters())
                self(torch.zeros(1, 3, height, width, dtype=p.dtype, device=p.device))
        finally:
            for h in hooks:
                h.remove()
        for shape, eh, ew in zip(seen, expect_h, expect_w):
            if shape[2:] != (eh, ew):
                raise AssertionError(f"runtime shape {shape} disagrees with size equation ({eh}, {ew})")
        if len(seen) != len(expect_h):
            raise AssertionError("layer count mismatch between module and size plan")
        return seen


def load_vgg16_trunk(model: SSNet, state_dict: Optional[dict] = None) -> SSNet:
    """Copy ImageNet VGG-16 convolution weights into the trunk.

    ``state_dict`` defaults to torchvision's VGG-16 weights, which may require a
    download; callers without network access should catch the error.
    """
    if model.arch.widths != tuple(c for c, _ in VGG_BLOCKS):
        raise ValueError("pretrained weights need width_mult=1")
    if state_dict is None:
        from torchvision.models import VGG16_Weights, vgg16
        state_dict = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).state_dict()
    src = [(state_dict[f"features.{i}.weight"], state_dict[f"features.{i}.bias"])
           for i in (0, 2, 5, 7, 10, 12, 14)]
    convs = [m for m in model.trunk if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        for conv, (w, b) in zip(convs, src):
            conv.weight.copy_(w)
            conv.bias.copy_(b)
    return model


# ---------------------------------------------------------------------------
# Probability maps


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    values: np.ndarray  # HxW built probability
    native: np.ndarray  # h'xw'x2 softmax output, channel 1 = built

    def to_uint8(self) -> np.ndarray:
        return np.rint(np.clip(self.values, 0, 1) * 255).astype(np.uint8)

    def save_png(self, path):
        from PIL import Image
        Image.fromarray(self.to_uint8(), "L").save(path)

    def save_npy(self, path):
        np.save(path, self.values.astype(np.float32))


def _interp_matrix(n_out: int, n_in: int, offset: float = (PATCH - 1) / 2, stride: int = STRIDE) -> np.ndarray:
    """Linear interpolation weights from a stride-8 grid (cell centres at 8i + 31.5) to pixels."""
    pos = (np.arange(n_out) - offset) / stride
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - t
    m[np.arange(n_out), hi] += t
    return m


def upsample_native(built: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a native built-probability grid to image size."""
    ry = _interp_matrix(height, built.shape[0])
    rx = _interp_matrix(width, built.shape[1])
    return ry @ built @ rx.T


def _to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    x = torch.tensor(pixels, dtype=dtype) / 255.0
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2)


def native_maps(model: SSNet, pixels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Softmax maps ``(N, h', w', 2)`` for a uint8 batch ``(N, H, W, 3)``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            p = model.probs(_to_tensor(pixels[i:i + batch_size], dtype))
            out.append(p.permute(0, 2, 3, 1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0, 0, 2))


def segment(model: SSNet, image) -> ProbabilityMap:
    pixels = image.pixels if isinstance(image, ImageTile) else np.asarray(image)
    H, W = pixels.shape[:2]
    if H < PATCH or W < PATCH:
        raise SizeError(f"image {H}x{W} is smaller than the {PATCH}x{PATCH} minimum")
    native = native_maps(model, pixels[None])[0]
    return ProbabilityMap(upsample_native(native[..., 1], H, W), native)


def segment_batch(model: SSNet, pixels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Upsampled built-probability maps ``(N, H, W)`` for a uint8 batch."""
    N, H, W = pixels.shape[:3]
    if H < PATCH or W < PATCH:
        raise SizeError(f"images {H}x{W} are smaller than the {PATCH}x{PATCH} minimum")
    native = native_maps(model, pixels, batch_size)[..., 1]
    ry = _interp_matrix(H, native.shape[1])
    rx = _interp_matrix(W, native.shape[2])
    return np.matmul(np.matmul(ry, native), rx.T)


def segmentation_metrics(pred, truth, threshold: float = 0.5) -> tuple[float, float]:
    """Pixel accuracy and built-class F1.

    F1 is 1 when neither prediction nor truth contains a built pixel, and 0 when
    precision or recall is undefined otherwise.
    """
    p = np.asarray(getattr(pred, "values", pred)) >= threshold
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {t.shape}")
    acc = float(np.mean(p == t))
    tp = int(np.count_nonzero(p & t))
    n_pred, n_true = int(p.sum()), int(t.sum())
    if n_pred == 0 and n_true == 0:
        return acc, 1.0
    if n_pred == 0 or n_true == 0 or tp == 0:
        return acc, 0.0
    precision, recall = tp / n_pred, tp / n_true
    return acc, 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Patches, training and hard-negative mining


@dataclass(frozen=True, eq=False)
class PatchSet:
    pixels: np.ndarray  # (N, S, S, 3) uint8
    labels: np.ndarray  # (N,) 1 = built
    refs: tuple[str, ...]

    def __post_init__(self):
        if len(self.pixels) != len(self.labels) or len(self.labels) != len(self.refs):
            raise ValueError("pixels, labels and refs must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=int)
        return PatchSet(self.pixels[idx], self.labels[idx], tuple(self.refs[i] for i in idx))

    @staticmethod
    def concat(sets: Sequence["PatchSet"]) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        return PatchSet(np.concatenate([s.pixels for s in sets]), np.concatenate([s.labels for s in sets]),
                        tuple(r for s in sets for r in s.refs))


def patch_label(mask: np.ndarray, label_window: int = 16, built_fraction: float = 0.25) -> int:
    """1 when the central ``label_window`` square of a mask crop is at least ``built_fraction`` built."""
    H, W = mask.shape
    y, x = (H - label_window) // 2, (W - label_window) // 2
    return int(mask[y:y + label_window, x:x + label_window].mean() >= built_fraction)


def crop_label(mask: np.ndarray, label_window: int = 16, built_fraction: float = 0.25) -> int:
    """Label of a square crop of any size >= 64: built if any stride-8 decision window is built.

    A 64 px crop reduces to :func:`patch_label`; a larger crop is negative only when the
    network would have no built location to find in it.
    """
    n = (mask.shape[0] - PATCH) // STRIDE + 1
    m = (mask.shape[1] - PATCH) // STRIDE + 1
    for i in range(n):
        for j in range(m):
            sub = mask[i * STRIDE:i * STRIDE + PATCH, j * STRIDE:j * STRIDE + PATCH]
            if patch_label(sub, label_window, built_fraction):
                return 1
    return 0


def sample_patches(tiles: Sequence[ImageTile], per_tile: int, size: int = PATCH, seed: int = 0,
                   label_window: int = 16, built_fraction: float = 0.25,
                   label: Optional[int] = None) -> PatchSet:
    """Random square crops from masked tiles, labelled with :func:`crop_label`.

    With ``label`` given, only crops of that label are kept.
    """
    rng = np.random.default_rng(seed)
    pix, labels, refs = [], [], []
    for tile in tiles:
        if tile.mask is None:
            raise ValueError(f"tile {tile.id!r} has no mask")
        H, W = tile.mask.shape
        if H < size or W < size:
            continue
        got = tries = 0
        while got < per_tile and tries < per_tile * 20:
            tries += 1
            y, x = int(rng.integers(0, H - size + 1)), int(rng.integers(0, W - size + 1))
            lab = crop_label(tile.mask[y:y + size, x:x + size], label_window, built_fraction)
            if label is not None and lab != label:
                continue
            pix.append(tile.pixels[y:y + size, x:x + size])
            labels.append(lab)
            refs.append(f"{tile.id}@{y},{x},{size}")
            got += 1
    if not pix:
        return PatchSet(np.zeros((0, size, size, 3), np.uint8), np.zeros(0, np.int64), ())
    return PatchSet(np.stack(pix), np.array(labels, np.int64), tuple(refs))


@dataclass(frozen=True)
class MiningState:
    epoch_counter: int = 0
    negative_pool: frozenset = frozenset()
    mining_interval: int = 15
    rounds: int = 0


def false_positive_mask(model: SSNet, patches: PatchSet, threshold: float = 0.5) -> np.ndarray:
    """True where a non-built patch has a built probability above ``threshold`` anywhere."""
    if len(patches) == 0:
        return np.zeros(0, bool)
    built = native_maps(model, patches.pixels)[..., 1]
    peak = built.reshape(len(patches), -1).max(axis=1)
    return (patches.labels == 0) & (peak > threshold)


def false_positive_rate(model: SSNet, negatives: PatchSet, threshold: float = 0.5) -> float:
    if len(negatives) == 0:
        return 0.0
    return float(false_positive_mask(model, negatives, threshold).mean())


def mine_hard_negatives(model: SSNet, candidates: PatchSet, state: MiningState,
                        threshold: float = 0.5) -> MiningState:
    if state.epoch_counter % state.mining_interval != 0:
        raise ValueError(f"mining called at epoch {state.epoch_counter}, "
                         f"not a multiple of the interval {state.mining_interval}")
    if len(candidates) == 0:
        log.info("hard-negative mining: empty candidate pool, nothing to do")
        return replace(state, rounds=state.rounds + 1)
    fp = false_positive_mask(model, candidates, threshold)
    found = {candidates.refs[i] for i in np.flatnonzero(fp)}
    log.info("hard-negative mining at epoch %d: %d false positives of %d candidates",
             state.epoch_counter, len(found), len(candidates))
    return replace(state, negative_pool=state.negative_pool | found, rounds=state.rounds + 1)


@dataclass
class SSNetTrainConfig:
    epochs: int = 45
    batch_size: int = 16
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 0.0
    mining_interval: int = 15
    augment: bool = True
    seed: int = 0
    arch: SSNetArch = field(default_factory=SSNetArch)


@dataclass
class SSNetHistory:
    loss: list = field(default_factory=list)  # mean training loss per epoch
    initial_loss: float = float("nan")
    mining_epochs: list = field(default_factory=list)
    pool_sizes: list = field(default_factory=list)
    heldout_fp: list = field(default_factory=list)  # (epoch, rate) before each mining round and at the end
    state: MiningState = field(default_factory=MiningState)


def _augmented(patches: PatchSet) -> PatchSet:
    pix, labels, refs = [], [], []
    for p, lab, ref in zip(patches.pixels, patches.labels, patches.refs):
        for k, a in enumerate(patch_augmentations(p)):
            pix.append(a)
            labels.append(lab)
            refs.append(ref if k == 0 else f"{ref}#{k}")
    return PatchSet(np.stack(pix), np.array(labels, np.int64), tuple(refs))


def _mean_loss(model, groups, batch_size):
    model.eval()
    dtype = next(model.parameters()).dtype
    total, n = 0.0, 0
    with torch.no_grad():
        for g in groups:
            for i in range(0, len(g), batch_size):
                x = _to_tensor(g.pixels[i:i + batch_size], dtype)
                y = torch.from_numpy(g.labels[i:i + batch_size])
                logits = model(x)
                target = y.view(-1, 1, 1).expand(-1, logits.shape[2], logits.shape[3])
                total += float(F.cross_entropy(logits, target, reduction="sum")) / (logits.shape[2] * logits.shape[3])
                n += len(y)
    return total / max(n, 1)


def train_ssnet(train: PatchSet, config: SSNetTrainConfig = SSNetTrainConfig(), *,
                candidates: Optional[PatchSet] = None, heldout_negatives: Optional[PatchSet] = None,
                model: Optional[SSNet] = None, init: Optional[Callable[[SSNet], SSNet]] = None,
                on_epoch: Optional[Callable[[int, float], None]] = None) -> tuple[SSNet, SSNetHistory]:
    """Train on 64x64 labelled patches with per-location two-class cross-entropy.

    Every ``mining_interval`` epochs the candidate pool is scored and false positives
    join the training set as negatives for the remaining epochs. Mined patches may be
    any square size of at least 64 px; batches are formed per patch size.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.pixels.shape[1:3] != (PATCH, PATCH):
        raise SizeError(f"training patches must be {PATCH}x{PATCH}, got {train.pixels.shape[1:3]}")
    if len(np.unique(train.labels)) < 2:
        warnings.warn("training stream contains a single class; segmentation training is degenerate",
                      RuntimeWarning, stacklevel=2)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = SSNet(config.arch)
        if init is not None:
            model = init(model)
    with torch.no_grad():
        model.mean.copy_(torch.from_numpy(train.pixels.reshape(-1, 3).mean(0) / 255.0))

    base = _augmented(train) if config.augment else train
    mined = PatchSet(np.zeros((0,) + train.pixels.shape[1:], np.uint8), np.zeros(0, np.int64), ())
    cand_index = {} if candidates is None else {r: i for i, r in enumerate(candidates.refs)}
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    dtype = next(model.parameters()).dtype
    history = SSNetHistory(state=MiningState(mining_interval=config.mining_interval))
    history.initial_loss = _mean_loss(model, [base], config.batch_size)

    for epoch in range(1, config.epochs + 1):
        groups = [base] + ([mined] if len(mined) else [])
        batches = []
        for gi, g in enumerate(groups):
            order = rng.permutation(len(g))
            batches += [(gi, order[i:i + config.batch_size]) for i in range(0, len(g), config.batch_size)]
        rng.shuffle(batches)
        model.train()
        total, seen = 0.0, 0
        for gi, idx in batches:
            g = groups[gi]
            x = _to_tensor(g.pixels[idx], dtype)
            y = torch.from_numpy(g.labels[idx])
            logits = model(x)
            target = y.view(-1, 1, 1).expand(-1, logits.shape[2], logits.shape[3])
            loss = F.cross_entropy(logits, target)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite SS-Net loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.loss.append(total / seen)
        if on_epoch is not None:
            on_epoch(epoch, history.loss[-1])

        state = replace(history.state, epoch_counter=epoch)
        if epoch % config.mining_interval == 0 and candidates is not None:
            if heldout_negatives is not None:
                history.heldout_fp.append((epoch, false_positive_rate(model, heldout_negatives)))
            state = mine_hard_negatives(model, candidates, state)
            history.mining_epochs.append(epoch)
            history.pool_sizes.append(len(state.negative_pool))
            new_refs = sorted(state.negative_pool - set(mined.refs))
            if new_refs:
                add = candidates.subset([cand_index[r] for r in new_refs])
                add = PatchSet(add.pixels, np.zeros(len(add), np.int64), add.refs)
                mined = PatchSet.concat([mined, add]) if len(mined) else add
        history.state = state
    if heldout_negatives is not None:
        history.heldout_fp.append((config.epochs, false_positive_rate(model, heldout_negatives)))
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints


def ssnet_arrays(model: SSNet) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def ssnet_meta(model: SSNet) -> dict:
    return {"kind": "ssnet", "arch": asdict(model.arch), "mean": model.mean.tolist()}


def ssnet_from_arrays(meta: dict, arrays: dict) -> SSNet:
    model = SSNet(SSNetArch(**meta["arch"]))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.eval()
    return model


def save_ssnet(model: SSNet, path, extra: Optional[dict] = None):
    meta = ssnet_meta(model)
    if extra:
        meta["extra"] = extra
    return ckpt.save_container(path, meta, ssnet_arrays(model))


def load_ssnet(path) -> SSNet:
    meta, arrays = ckpt.load_container(path)
    if meta.get("kind") != "ssnet":
        raise ckpt.CheckpointError(f"{path} is a {meta.get('kind')!r} checkpoint, not ssnet")
    return ssnet_from_arrays(meta, arrays)
