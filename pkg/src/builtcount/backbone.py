"""Frozen feature extractors.

Two backbones are available: DenseNet-121 (ImageNet weights through
torchvision when they can be loaded) and a small randomly initialised CNN with
the same stride-32 ladder for offline runs. Pixels are scaled to [0, 1] and
never mean-subtracted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .dataset import ImageTile
from .ssnet import SizeError, output_size

TINY_CHANNELS = (8, 16, 32, 64, 64)


class TinyCNN(nn.Module):
    """Five conv3x3 + ReLU + maxpool2 stages: stride 32, 64 output channels."""

    def __init__(self, channels=TINY_CHANNELS, seed: int = 0):
        super().__init__()
        layers = []
        c_in = 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2, 2)]
            c_in = c
        self.features = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                with torch.no_grad():
                    m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                    m.bias.uniform_(-0.05, 0.05, generator=gen)

    def forward(self, x):
        return self.features(x)


class DenseNetFeatures(nn.Module):
    def __init__(self, pretrained: bool = True):
        super().__init__()
        from torchvision.models import DenseNet121_Weights, densenet121
        net = densenet121(weights=DenseNet121_Weights.IMAGENET1K_V1 if pretrained else None)
        self.features = net.features

    def forward(self, x):
        return F.relu(self.features(x))


@dataclass(eq=False)
class BackboneHandle:
    descriptor: str
    module: nn.Module
    stride: int
    channels: int
    layers: tuple  # (K, S, P) of every size-changing layer
    frozen: bool = True

    def __post_init__(self):
        self.freeze()

    def freeze(self):
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.frozen = True

    def volume_size(self, height: int, width: int) -> tuple[int, int]:
        h, w = height, width
        for K, S, P in self.layers:
            h, w = output_size(h, P, K, S), output_size(w, P, K, S)
        return h, w

    @property
    def min_input(self) -> int:
        n = 1
        while True:
            try:
                if min(self.volume_size(n, n)) >= 1:
                    return n
            except SizeError:
                pass
            n += 1

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.module.state_dict().items()}


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    values: np.ndarray  # C x h x w
    source_size: tuple[int, int]


def tiny_backbone(seed: int = 0) -> BackboneHandle:
    mod = TinyCNN(seed=seed)
    layers = []
    for _ in TINY_CHANNELS:
        layers += [(3, 1, 1), (2, 2, 0)]
    return BackboneHandle(f"tiny-cnn:seed={seed}", mod, 32, TINY_CHANNELS[-1], tuple(layers))


def densenet121_backbone(pretrained: bool = True) -> BackboneHandle:
    mod = DenseNetFeatures(pretrained)
    layers = ((7, 2, 3), (3, 2, 1), (2, 2, 0), (2, 2, 0), (2, 2, 0))
    return BackboneHandle("densenet121:" + ("imagenet" if pretrained else "random"), mod, 32, 1024, layers)


def get_backbone(descriptor: str) -> BackboneHandle:
    name, _, arg = descriptor.partition(":")
    if name == "tiny-cnn":
        seed = int(arg.split("=", 1)[1]) if arg.startswith("seed=") else 0
        return tiny_backbone(seed)
    if name == "densenet121":
        return densenet121_backbone(pretrained=(arg or "imagenet") == "imagenet")
    raise ValueError(f"unknown backbone descriptor {descriptor!r}")


def _check_size(handle: BackboneHandle, H: int, W: int):
    if min(H, W) < handle.min_input:
        raise SizeError(f"image {H}x{W} is smaller than the backbone minimum {handle.min_input}")


def to_input(pixels: np.ndarray) -> torch.Tensor:
    """uint8 ``(N, H, W, 3)`` to float ``(N, 3, H, W)`` in [0, 1]."""
    x = torch.tensor(pixels, dtype=torch.float32) / 255.0
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2)


def extract_volumes(handle: BackboneHandle, pixels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Feature volumes ``(N, C, h, w)`` for a uint8 batch ``(N, H, W, 3)``."""
    _check_size(handle, *pixels.shape[1:3])
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            out.append(handle.module(to_input(pixels[i:i + batch_size])).numpy())
    return np.concatenate(out)


def extract_volume(handle: BackboneHandle, image) -> FeatureVolume:
    pixels = image.pixels if isinstance(image, ImageTile) else np.asarray(image)
    H, W = pixels.shape[:2]
    return FeatureVolume(extract_volumes(handle, pixels[None])[0], (H, W))


def extract_pooled(handle: BackboneHandle, image) -> np.ndarray:
    return extract_volume(handle, image).values.mean(axis=(1, 2))


def save_backbone(handle: BackboneHandle, path):
    return ckpt.save_container(path, {"kind": "backbone", "descriptor": handle.descriptor},
                               handle.parameter_arrays())


def load_backbone(path, descriptor: Optional[str] = None) -> BackboneHandle:
    meta, arrays = ckpt.load_container(path)
    if meta.get("kind") != "backbone":
        raise ckpt.CheckpointError(f"{path} is not a backbone checkpoint")
    desc = descriptor or meta["descriptor"]
    name = desc.partition(":")[0]
    handle = densenet121_backbone(pretrained=False) if name == "densenet121" else get_backbone(desc)
    handle.module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    handle.descriptor = desc
    handle.freeze()
    return handle
