"""Procedural overhead scenes with exact building counts and masks.

Scenes are drawn on a flat field, sand or dry-grass background crossed by road
strips with small bright vehicles on them. Vehicles and roads are never
counted and never enter the mask. Buildings are rectangles, L-shapes or
45-degree rotated rectangles whose ground area matches small residential
structures at the tile resolution.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .dataset import (DEFAULT_METERS_PER_PIXEL, ImageTile, Manifest, ManifestEntry, save_tile,
                      write_manifest)

DENSITIES = ("sparse", "medium", "dense")
_GAP_PX = {"sparse": 2, "medium": 1, "dense": 0}
# fraction of the free (non-road) area that footprints may occupy
_FILL_CAP = {"sparse": 0.20, "medium": 0.30, "dense": 0.40}  # of the image area, at the mean footprint
FOOTPRINT_M2 = (15.0, 30.0)

_BACKGROUNDS = {
    "field": ((86, 112, 58), (120, 128, 74)),
    "sand": ((196, 176, 138), (214, 190, 150)),
    "grass": ((140, 138, 92), (160, 150, 104)),
}
_ROOFS = np.array([
    (178, 84, 62), (150, 70, 55), (200, 196, 188), (120, 118, 116), (170, 150, 120),
    (92, 96, 104), (224, 220, 210), (140, 100, 70), (188, 120, 80), (105, 130, 140),
], dtype=np.float32)


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    count: int
    size_px: int = 336
    density: str = "medium"
    adjacency_prob: float = 0.3
    seed: int = 0
    meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL
    roads: Optional[int] = None  # None: random 0-2
    vehicles_per_road: int = 4

    def __post_init__(self):
        if self.count < 0 or int(self.count) != self.count:
            raise ValueError("count must be a non-negative integer")
        if self.size_px < 64:
            raise ValueError("size_px must be at least 64")
        if self.density not in DENSITIES:
            raise ValueError(f"density must be one of {DENSITIES}")
        if not 0.0 <= self.adjacency_prob <= 1.0:
            raise ValueError("adjacency_prob must lie in [0, 1]")


@dataclass
class Scene:
    tile: ImageTile
    instances: np.ndarray  # int32 label image, 0 = not built, k = k-th placed building
    roads: np.ndarray  # bool
    vehicles: np.ndarray  # bool

    @property
    def n_footprints(self) -> int:
        return int(len(np.unique(self.instances[self.instances > 0])))


def footprint_px_range(meters_per_pixel: float) -> tuple[float, float]:
    a = meters_per_pixel ** 2
    return FOOTPRINT_M2[0] / a, FOOTPRINT_M2[1] / a


def max_feasible_count(size_px: int, density: str, meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL) -> int:
    lo, hi = footprint_px_range(meters_per_pixel)
    return int(size_px * size_px * _FILL_CAP[density] / ((lo + hi) / 2))


def _background(rng, size):
    kind = rng.choice(list(_BACKGROUNDS))
    c0, c1 = (np.array(c, np.float32) for c in _BACKGROUNDS[kind])
    coarse = rng.random((size // 24 + 2, size // 24 + 2))
    smooth = ndimage.zoom(coarse, size / (coarse.shape[0] - 1), order=1)[:size, :size]
    img = c0 + (c1 - c0) * smooth[..., None]
    img += rng.normal(0, 6, (size, size, 1)) + rng.normal(0, 3, (size, size, 3))
    return img


def _draw_roads(rng, img, n_roads):
    size = img.shape[0]
    roads = np.zeros((size, size), bool)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_roads):
        width = int(rng.integers(10, 17))
        kind = rng.integers(0, 3)
        off = rng.uniform(0.15, 0.85) * size
        if kind == 0:
            band = np.abs(yy - off) < width / 2
        elif kind == 1:
            band = np.abs(xx - off) < width / 2
        else:
            band = np.abs((yy - xx) / math.sqrt(2) - (off - size / 2)) < width / 2
        roads |= band
    shade = rng.uniform(95, 125)
    img[roads] = shade + rng.normal(0, 4, (int(roads.sum()), 1))
    return roads


def _draw_vehicles(rng, img, roads, n):
    size = img.shape[0]
    vehicles = np.zeros((size, size), bool)
    ys, xs = np.nonzero(roads)
    if len(ys) == 0:
        return vehicles
    for _ in range(n):
        k = rng.integers(len(ys))
        h, w = (int(rng.integers(5, 8)), int(rng.integers(10, 15)))
        if rng.random() < 0.5:
            h, w = w, h
        y0, x0 = ys[k] - h // 2, xs[k] - w // 2
        if y0 < 0 or x0 < 0 or y0 + h > size or x0 + w > size:
            continue
        box = roads[y0:y0 + h, x0:x0 + w]
        if not box.all():
            continue
        colour = np.array([rng.uniform(180, 250)] * 3) + rng.normal(0, 15, 3)
        img[y0:y0 + h, x0:x0 + w] = colour
        vehicles[y0:y0 + h, x0:x0 + w] = True
    return vehicles


def _shape(rng, area_px, allow_rotated=True):
    """Return a boolean footprint and whether it is an axis-aligned rectangle."""
    aspect = rng.uniform(0.6, 1.7)
    kind = rng.choice(["rect", "rect", "L", "rot"] if allow_rotated else ["rect", "rect", "L"])
    if kind == "L":
        area_px *= 4 / 3  # corner cut removes about a quarter
    h = max(6, int(round(math.sqrt(area_px / aspect))))
    w = max(6, int(round(area_px / h)))
    if kind == "rect":
        return np.ones((h, w), bool), True
    if kind == "L":
        fp = np.ones((h, w), bool)
        ch, cw = max(2, h // 2), max(2, w // 2)
        corner = rng.integers(4)
        ys = slice(0, ch) if corner < 2 else slice(h - ch, h)
        xs = slice(0, cw) if corner % 2 == 0 else slice(w - cw, w)
        fp[ys, xs] = False
        return fp, False
    # rectangle rotated by 45 degrees
    d = int(math.ceil((h + w) / math.sqrt(2))) + 1
    c = (d - 1) / 2
    yy, xx = np.mgrid[0:d, 0:d] - c
    u = (xx + yy) / math.sqrt(2)
    v = (xx - yy) / math.sqrt(2)
    fp = (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)
    fp = fp[fp.any(1)][:, fp.any(0)]
    return fp, False


def _fits(occupied, fp, y0, x0, gap):
    H, W = occupied.shape
    h, w = fp.shape
    if y0 < 0 or x0 < 0 or y0 + h > H or x0 + w > W:
        return False
    if gap == 0:
        return not (occupied[y0:y0 + h, x0:x0 + w] & fp).any()
    ya, xa = max(0, y0 - gap), max(0, x0 - gap)
    yb, xb = min(H, y0 + h + gap), min(W, x0 + w + gap)
    grown = np.zeros((yb - ya, xb - xa), bool)
    grown[y0 - ya:y0 - ya + h, x0 - xa:x0 - xa + w] = fp
    grown = ndimage.binary_dilation(grown, np.ones((2 * gap + 1, 2 * gap + 1), bool))
    return not (occupied[ya:yb, xa:xb] & grown).any()


def _paint_building(rng, img, fp, y0, x0, occupied_by_other):
    h, w = fp.shape
    base = _ROOFS[rng.integers(len(_ROOFS))] * rng.uniform(0.85, 1.1)
    region = img[y0:y0 + h, x0:x0 + w]
    # pitched-roof shading: one half darker along the long axis
    if rng.random() < 0.6:
        if h >= w:
            ramp = np.where(np.arange(w) < w / 2, 1.0, 0.82)[None, :]
        else:
            ramp = np.where(np.arange(h) < h / 2, 1.0, 0.82)[:, None]
    else:
        ramp = np.ones((h, w)) * rng.uniform(0.9, 1.0)
    roof = base[None, None, :] * np.broadcast_to(ramp, (h, w))[..., None]
    roof = roof + rng.normal(0, 4, (h, w, 3))
    edge = fp & ~ndimage.binary_erosion(fp)
    roof[edge] *= 0.6
    region[fp] = roof[fp]
    # cast shadow down-right onto ground only
    s = 2
    shadow = np.zeros_like(fp)
    if h > s and w > s:
        shadow[s:, s:] = fp[:-s, :-s]
    shadow &= ~fp
    ground = shadow & ~occupied_by_other[y0:y0 + h, x0:x0 + w]
    region[ground] *= 0.55


def compose_scene(spec: SceneSpec) -> Scene:
    size = spec.size_px
    cap = max_feasible_count(size, spec.density, spec.meters_per_pixel)
    if spec.count > cap:
        raise GenerationError(
            f"count {spec.count} is infeasible for a {size}px {spec.density} scene; "
            f"maximum feasible count is {cap}")
    rng = np.random.default_rng(spec.seed)
    img = _background(rng, size)
    n_roads = int(rng.integers(0, 3)) if spec.roads is None else spec.roads
    roads = _draw_roads(rng, img, n_roads)
    vehicles = _draw_vehicles(rng, img, roads, spec.vehicles_per_road * n_roads)

    lo, hi = footprint_px_range(spec.meters_per_pixel)
    gap = _GAP_PX[spec.density]
    occupied = roads.copy()  # buildings never sit on roads
    built = np.zeros((size, size), bool)
    instances = np.zeros((size, size), np.int32)
    rects: list[tuple[int, int, int, int]] = []  # axis-aligned (y0, x0, h, w)

    for k in range(1, spec.count + 1):
        placed = False
        for attempt in range(400):
            area = rng.uniform(lo, hi) if attempt < 300 else lo
            fp, is_rect = _shape(rng, area)
            h, w = fp.shape
            if gap == 0 and rects and rng.random() < spec.adjacency_prob:
                fp, is_rect = np.ones((h, w), bool), True
                ry, rx, rh, rw = rects[rng.integers(len(rects))]
                side = rng.integers(4)
                if side == 0:
                    y0, x0 = ry - h, rx + int(rng.integers(-w // 2, rw - w // 2 + 1))
                elif side == 1:
                    y0, x0 = ry + rh, rx + int(rng.integers(-w // 2, rw - w // 2 + 1))
                elif side == 2:
                    y0, x0 = ry + int(rng.integers(-h // 2, rh - h // 2 + 1)), rx - w
                else:
                    y0, x0 = ry + int(rng.integers(-h // 2, rh - h // 2 + 1)), rx + rw
            else:
                y0 = int(rng.integers(0, size - h + 1))
                x0 = int(rng.integers(0, size - w + 1))
            if not _fits(occupied, fp, y0, x0, gap):
                continue
            _paint_building(rng, img, fp, y0, x0, built)
            occupied[y0:y0 + h, x0:x0 + w] |= fp
            built[y0:y0 + h, x0:x0 + w] |= fp
            instances[y0:y0 + h, x0:x0 + w][fp] = k
            if is_rect:
                rects.append((y0, x0, h, w))
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place building {k} of {spec.count} in a {size}px {spec.density} scene; "
                f"maximum feasible count is {cap} but packing failed at {k - 1}")

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    tile = ImageTile(f"scene-{spec.seed}", pixels, spec.count, mask=built,
                     meters_per_pixel=spec.meters_per_pixel)
    return Scene(tile, instances, roads, vehicles)


def generate_scene(spec: SceneSpec) -> ImageTile:
    return compose_scene(spec).tile


def density_for_count(count: int, size_px: int = 336) -> str:
    per_cell = count * (336 / size_px) ** 2
    if per_cell <= 30:
        return "sparse"
    if per_cell <= 60:
        return "medium"
    return "dense"


def split_for_id(id_: str) -> str:
    """80/10/10 train/val/test split from a stable hash of the id."""
    h = int.from_bytes(hashlib.sha256(id_.encode("utf-8")).digest()[:8], "big") % 100
    return "train" if h < 80 else ("val" if h < 90 else "test")


def _scene_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def generate_corpus(n: int, count_range: tuple[int, int], seed: int, out_dir, *,
                    size_px: int = 336, split: Optional[str] = None, id_prefix: str = "syn",
                    adjacency_prob: float = 0.3, manifest_name: str = "manifest.tsv") -> Manifest:
    """Write ``n`` scenes plus masks and a manifest under ``out_dir``.

    Counts are uniform over the closed ``count_range``. ``split`` forces every row into one
    split; by default the split comes from :func:`split_for_id`.
    """
    lo, hi = count_range
    if n < 1:
        raise ValueError("n must be >= 1")
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid count range {count_range}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    counts = rng.integers(lo, hi + 1, size=n)
    entries = []
    for i, count in enumerate(counts):
        id_ = f"{id_prefix}{i:05d}"
        spec = SceneSpec(int(count), size_px=size_px, density=density_for_count(int(count), size_px),
                         adjacency_prob=adjacency_prob, seed=_scene_seed(seed, i))
        tile = generate_scene(spec)
        img_path = out / "images" / f"{id_}.png"
        mask_path = out / "masks" / f"{id_}.png"
        save_tile(tile, img_path, mask_path)
        entries.append(ManifestEntry(id_, img_path, int(count), split or split_for_id(id_), mask_path))
    manifest = Manifest(tuple(entries), out)
    write_manifest(manifest, out / manifest_name)
    return manifest
