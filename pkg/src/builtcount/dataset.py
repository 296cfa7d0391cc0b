"""Tiles, manifests, count bands and label-preserving augmentation."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_METERS_PER_PIXEL = 0.3
DEFAULT_ZOOM = 19
EARTH_CIRCUMFERENCE_M = 40075016.686
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("id", "image_path", "count", "split", "mask_path", "bounds")


class ManifestError(Exception):
    """Raised when a manifest cannot be loaded or fails validation."""


class ManifestParseError(ManifestError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


GeoBounds = tuple[float, float, float, float]


@dataclass(frozen=True, eq=False)
class ImageTile:
    """An RGB raster with its ground-truth building count.

    ``geo_bounds`` is ``(lat_min, lat_max, lon_min, lon_max)`` in degrees.
    ``mask`` marks built pixels (nonzero = built) and must match the raster.
    """

    id: str
    pixels: np.ndarray
    count: int
    geo_bounds: Optional[GeoBounds] = None
    mask: Optional[np.ndarray] = None
    meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"tile {self.id!r}: pixels must be HxWx3, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"tile {self.id!r}: pixels must be uint8, got {px.dtype}")
        if int(self.count) != self.count or self.count < 0:
            raise ValueError(f"tile {self.id!r}: count must be a non-negative integer, got {self.count}")
        object.__setattr__(self, "count", int(self.count))
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != px.shape[:2]:
                raise ValueError(f"tile {self.id!r}: mask shape {mask.shape} != pixel shape {px.shape[:2]}")
            object.__setattr__(self, "mask", mask.astype(bool))
        if not self.meters_per_pixel > 0:
            raise ValueError(f"tile {self.id!r}: meters_per_pixel must be positive")
        if self.geo_bounds is not None:
            object.__setattr__(self, "geo_bounds", tuple(float(v) for v in self.geo_bounds))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def extent_m(self) -> tuple[float, float]:
        return (tile_extent_meters(self.height, self.meters_per_pixel),
                tile_extent_meters(self.width, self.meters_per_pixel))


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    count: int
    split: str
    mask_path: Optional[Path] = None
    geo_bounds: Optional[GeoBounds] = None


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()
    root: Optional[Path] = field(default=None, compare=False)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> "Manifest":
        return Manifest(tuple(e for e in self.entries if e.split == name), self.root)

    @property
    def counts(self) -> np.ndarray:
        return np.array([e.count for e in self.entries], dtype=np.int64)


@dataclass(frozen=True)
class CountBand:
    name: str
    lower: int
    upper: Optional[int]  # None = unbounded

    def __contains__(self, count) -> bool:
        return count >= self.lower and (self.upper is None or count <= self.upper)


LOW = CountBand("LOW", 0, 30)
MEDIUM = CountBand("MEDIUM", 31, 60)
HIGH = CountBand("HIGH", 61, None)
BANDS = (LOW, MEDIUM, HIGH)


def band_of(count) -> CountBand:
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    for band in BANDS:
        if count in band:
            return band
    raise ValueError(f"count {count} is not an integer")


def tile_extent_meters(size_px, meters_per_pixel) -> float:
    if size_px <= 0 or meters_per_pixel <= 0:
        raise ValueError("size_px and meters_per_pixel must be positive")
    return size_px * meters_per_pixel


def ground_resolution(lat_deg: float, zoom: int = DEFAULT_ZOOM, tile_px: int = 256) -> float:
    """Web-Mercator meters per pixel at a latitude and zoom level."""
    return EARTH_CIRCUMFERENCE_M * math.cos(math.radians(lat_deg)) / (tile_px * 2 ** zoom)


# ---------------------------------------------------------------------------
# Manifest I/O


def _parse_bounds(text: str) -> GeoBounds:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError("bounds need 4 comma-separated values")
    lat_min, lat_max, lon_min, lon_max = parts
    if not (lat_min <= lat_max and lon_min <= lon_max):
        raise ValueError("bounds must satisfy lat_min<=lat_max and lon_min<=lon_max")
    return (lat_min, lat_max, lon_min, lon_max)


def _parse_row(fields: list[str], base: Path) -> ManifestEntry:
    if len(fields) < 4 or len(fields) > 6:
        raise ValueError(f"expected 4 to 6 tab-separated fields, got {len(fields)}")
    id_, image, count_s, split = (f.strip() for f in fields[:4])
    if not id_:
        raise ValueError("empty id")
    try:
        count = int(count_s)
    except ValueError:
        raise ValueError(f"count {count_s!r} is not an integer") from None
    if count < 0:
        raise ValueError(f"count {count} is negative")
    if split not in SPLITS:
        raise ValueError(f"split {split!r} not in {SPLITS}")
    mask = None
    if len(fields) > 4 and fields[4].strip() not in ("", "-"):
        mask = base / fields[4].strip()
    bounds = None
    if len(fields) > 5 and fields[5].strip() not in ("", "-"):
        bounds = _parse_bounds(fields[5].strip())
    return ManifestEntry(id_, base / image, count, split, mask, bounds)


def _check_readable(path: Path, what: str, entry_id: str):
    if not path.is_file() or not os.access(path, os.R_OK):
        raise ManifestError(f"entry {entry_id!r}: {what} {path} is not a readable file")
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:
        raise ManifestError(f"entry {entry_id!r}: {what} {path} is not a readable image ({exc})") from None


def load_manifest(path, validate_files: bool = True) -> Manifest:
    """Parse a tab-separated manifest.

    Relative image and mask paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    base = path.parent
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if tuple(f.strip() for f in fields[:4]) == MANIFEST_COLUMNS[:4]:
                continue
            try:
                entry = _parse_row(fields, base)
            except ValueError as exc:
                raise ManifestParseError(path, lineno, str(exc)) from None
            if entry.id in seen:
                raise ManifestParseError(path, lineno, f"duplicate id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    if validate_files:
        for e in entries:
            _check_readable(e.image_path, "image", e.id)
            if e.mask_path is not None:
                _check_readable(e.mask_path, "mask", e.id)
    return Manifest(tuple(entries), base)


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p)
        try:
            return os.path.relpath(p.resolve(), base)
        except ValueError:
            return str(p.resolve())

    lines = ["\t".join(MANIFEST_COLUMNS)]
    for e in manifest.entries:
        row = [e.id, rel(e.image_path), str(e.count), e.split,
               rel(e.mask_path) if e.mask_path is not None else "-"]
        if e.geo_bounds is not None:
            row.append(",".join(repr(float(v)) for v in e.geo_bounds))
        lines.append("\t".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_tile(entry: ManifestEntry, meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL) -> ImageTile:
    with Image.open(entry.image_path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    mask = None
    if entry.mask_path is not None:
        with Image.open(entry.mask_path) as im:
            mask = np.asarray(im.convert("L")) > 127
    return ImageTile(entry.id, pixels, entry.count, entry.geo_bounds, mask, meters_per_pixel)


def iter_tiles(manifest: Manifest) -> Iterable[ImageTile]:
    """Yield tiles in manifest order. Single consumer: the generator is not shareable."""
    for entry in manifest.entries:
        yield load_tile(entry)


def save_tile(tile: ImageTile, image_path, mask_path=None):
    Image.fromarray(tile.pixels, "RGB").save(image_path)
    if mask_path is not None:
        if tile.mask is None:
            raise ValueError(f"tile {tile.id!r} has no mask")
        Image.fromarray(tile.mask.astype(np.uint8) * 255, "L").save(mask_path)


# ---------------------------------------------------------------------------
# Augmentation

_ISOMETRIES = (
    ("orig", lambda a: a),
    ("hflip", lambda a: a[:, ::-1]),
    ("vflip", lambda a: a[::-1, :]),
    ("rot90", lambda a: np.rot90(a, 1)),
    ("rot270", lambda a: np.rot90(a, 3)),
)


def augment_counting(tile: ImageTile) -> list[ImageTile]:
    """Original, horizontal flip, vertical flip, 90 and 270 degree rotations."""
    out = []
    for name, op in _ISOMETRIES:
        mask = None if tile.mask is None else np.ascontiguousarray(op(tile.mask))
        tid = tile.id if name == "orig" else f"{tile.id}:{name}"
        out.append(replace(tile, id=tid, pixels=np.ascontiguousarray(op(tile.pixels)), mask=mask,
                           geo_bounds=tile.geo_bounds if name == "orig" else None))
    return out


def rotate_reflect(arr: np.ndarray, angle: float, order: int = 1) -> np.ndarray:
    """Rotate about the centre keeping the input size; exposed corners are filled by reflection."""
    out = ndimage.rotate(arr.astype(np.float32), angle, axes=(1, 0), reshape=False,
                         order=order, mode="reflect")
    if arr.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if arr.dtype == bool:
        return out > 0.5
    return out.astype(arr.dtype)


def patch_augmentations(arr: np.ndarray) -> list[np.ndarray]:
    """The five patch variants on a raw HxW[xC] array: original, hflip, vflip, +45 and -45 degrees."""
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"patch must be square, got {arr.shape[:2]}")
    return [arr, np.ascontiguousarray(arr[:, ::-1]), np.ascontiguousarray(arr[::-1]),
            rotate_reflect(arr, 45), rotate_reflect(arr, -45)]


def augment_patch(patch: ImageTile) -> list[ImageTile]:
    """Segmentation-patch augmentation. ``patch.count`` carries the built (1) / non-built (0) label."""
    if patch.height != patch.width:
        raise ValueError(f"patch must be square, got {patch.height}x{patch.width}")
    names = ("orig", "hflip", "vflip", "rot45", "rot-45")
    pix = patch_augmentations(patch.pixels)
    masks = [None] * 5
    if patch.mask is not None:
        masks = [m if m.dtype == bool else m > 0.5 for m in patch_augmentations(patch.mask)]
    return [replace(patch, id=patch.id if n == "orig" else f"{patch.id}:{n}", pixels=p, mask=m, geo_bounds=None)
            for n, p, m in zip(names, pix, masks)]


# ---------------------------------------------------------------------------
# Built-up statistics


def built_up_ratio(prob_map, threshold: float = 0.5) -> float:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    values = getattr(prob_map, "values", prob_map)
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("empty probability map")
    return float(np.count_nonzero(values >= threshold)) / values.size


def built_up_table(ratios: Sequence[float], counts: Sequence[int],
                   ratio_bins: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 1.0),
                   count_bins: Sequence[int] = (0, 31, 61, 10**9)) -> np.ndarray:
    """Joint histogram of built-up ratio versus labelled count.

    Rows follow ``ratio_bins`` intervals, columns ``count_bins`` intervals (both half-open,
    last interval closed).
    """
    hist, _, _ = np.histogram2d(np.asarray(ratios, float), np.asarray(counts, float),
                                bins=[np.asarray(ratio_bins, float), np.asarray(count_bins, float)])
    return hist.astype(np.int64)
