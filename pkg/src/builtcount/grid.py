"""Large-tile counting on a grid of fixed-size cells, and heatmap rendering."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .dataset import DEFAULT_METERS_PER_PIXEL, ImageTile
from .heads import CountModel, clamp_count, predict_pixels

log = logging.getLogger(__name__)

CELL_SIZE = 336
CELL_COLUMNS = ("row", "col", "x0", "y0", "pred", "truth")
# (lower, upper) inclusive; None = unbounded
DEFAULT_BINS = ((0, 0), (1, 10), (11, 20), (21, 30), (31, 40), (41, None))

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Cell:
    row: int
    col: int
    x0: int
    y0: int
    pred: int
    truth: Optional[int] = None
    padded: bool = False
    raw: float = field(default=float("nan"), compare=False)


@dataclass(frozen=True)
class CellGrid:
    cell_size: int
    image_size: tuple[int, int]  # (H, W) before padding
    cells: tuple[Cell, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return (max(c.row for c in self.cells) + 1, max(c.col for c in self.cells) + 1)

    @property
    def predicted_total(self) -> int:
        return sum(c.pred for c in self.cells)

    @property
    def truth_total(self) -> Optional[int]:
        if any(c.truth is None for c in self.cells):
            return None
        return sum(c.truth for c in self.cells)

    def with_truths(self, truths: dict) -> "CellGrid":
        cells = tuple(Cell(c.row, c.col, c.x0, c.y0, c.pred, truths.get((c.row, c.col)), c.padded, c.raw)
                      for c in self.cells)
        return CellGrid(self.cell_size, self.image_size, cells)


def pad_to_multiple(pixels: np.ndarray, cell: int) -> np.ndarray:
    H, W = pixels.shape[:2]
    ph, pw = (-H) % cell, (-W) % cell
    if ph == 0 and pw == 0:
        return pixels
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(H, W) > max(ph, pw) else "symmetric")


def _predictor(model) -> Predictor:
    if isinstance(model, CountModel):
        return lambda px: predict_pixels(model, px)
    if callable(model):
        return model
    raise TypeError("model must be a CountModel or a callable on (N, H, W, 3) uint8 arrays")


def count_tile(model: Union[CountModel, Predictor], image, cell_size: int = CELL_SIZE, workers: int = 1,
               batch: int = 8, truths: Optional[dict] = None,
               meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL) -> CellGrid:
    """Count every ``cell_size`` cell of a large image independently.

    Dimensions that are not cell multiples are padded on the right and bottom by
    reflection; such cells are flagged ``padded``. Results are ordered by (row, col)
    whatever the worker completion order.
    """
    pixels = image.pixels if isinstance(image, ImageTile) else np.asarray(image)
    H, W = pixels.shape[:2]
    if H < cell_size or W < cell_size:
        raise ValueError(f"image {H}x{W} is smaller than one {cell_size}px cell; "
                         f"run single-image inference instead")
    padded = pad_to_multiple(pixels, cell_size)
    rows, cols = padded.shape[0] // cell_size, padded.shape[1] // cell_size
    coords = [(r, c) for r in range(rows) for c in range(cols)]
    crops = np.stack([padded[r * cell_size:(r + 1) * cell_size, c * cell_size:(c + 1) * cell_size]
                      for r, c in coords])
    predict = _predictor(model)
    chunks = [crops[i:i + batch] for i in range(0, len(crops), batch)]
    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            raws = np.concatenate(list(pool.map(predict, chunks)))
    else:
        raws = np.concatenate([predict(ch) for ch in chunks])
    dt = time.perf_counter() - t0
    km2 = len(coords) * (cell_size * meters_per_pixel / 1000.0) ** 2
    log.info("counted %d cells in %.2fs: %.3f sec/image, %.3f sec/km^2", len(coords), dt,
             dt / len(coords), dt / km2)
    truths = truths or {}
    cells = tuple(
        Cell(r, c, c * cell_size, r * cell_size, clamp_count(float(raw)), truths.get((r, c)),
             (r + 1) * cell_size > H or (c + 1) * cell_size > W, float(raw))
        for (r, c), raw in zip(coords, raws))
    return CellGrid(cell_size, (H, W), cells)


# ---------------------------------------------------------------------------
# Cell tables


def write_cell_table(grid: CellGrid, path) -> Path:
    path = Path(path)
    has_truth = grid.truth_total is not None
    padded = ";".join(f"{c.row}:{c.col}" for c in grid.cells if c.padded)
    lines = [f"# cell_size={grid.cell_size}",
             f"# image_size={grid.image_size[0]},{grid.image_size[1]}",
             f"# padded={padded}",
             "\t".join(CELL_COLUMNS if has_truth else CELL_COLUMNS[:-1])]
    for c in grid.cells:
        row = [c.row, c.col, c.x0, c.y0, c.pred] + ([c.truth] if has_truth else [])
        lines.append("\t".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_cell_table(path) -> CellGrid:
    meta = {}
    cells = []
    header = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
            continue
        fields = line.split("\t")
        if header is None:
            header = fields
            if tuple(header) not in (CELL_COLUMNS, CELL_COLUMNS[:-1]):
                raise ValueError(f"{path}: unexpected cell-table header {header}")
            continue
        cells.append([int(v) for v in fields])
    padded = {tuple(int(x) for x in p.split(":")) for p in meta.get("padded", "").split(";") if p}
    size = int(meta.get("cell_size", CELL_SIZE))
    if "image_size" in meta:
        image_size = tuple(int(v) for v in meta["image_size"].split(","))
    else:
        image_size = (max(c[0] for c in cells) * size + size, max(c[1] for c in cells) * size + size)
    out = tuple(Cell(r[0], r[1], r[2], r[3], r[4], r[5] if len(r) > 5 else None, (r[0], r[1]) in padded)
                for r in cells)
    return CellGrid(size, image_size, out)


def read_truth_table(path) -> dict:
    """``row  col  truth`` rows (header optional) to a {(row, col): truth} mapping."""
    truths = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if not f[0].strip().lstrip("-").isdigit():
            continue
        truths[(int(f[0]), int(f[1]))] = int(f[-1])
    return truths


# ---------------------------------------------------------------------------
# Heatmaps


def parse_bins(text: str) -> tuple:
    """``"0,1-10,11-20,>40"`` style bin list."""
    bins = []
    for part in text.split(","):
        part = part.strip()
        if part.startswith(">"):
            bins.append((int(part[1:]) + 1, None))
        elif "-" in part:
            lo, hi = part.split("-")
            bins.append((int(lo), int(hi)))
        else:
            bins.append((int(part), int(part)))
    return tuple(bins)


def bin_label(b) -> str:
    lo, hi = b
    if hi is None:
        return f">{lo - 1}"
    return str(lo) if lo == hi else f"{lo}-{hi}"


def bin_index(count: int, bins) -> int:
    for i, (lo, hi) in enumerate(bins):
        if count >= lo and (hi is None or count <= hi):
            return i
    raise ValueError(f"count {count} is not covered by bins {[bin_label(b) for b in bins]}")


def bin_colours(n: int) -> list[tuple[int, int, int]]:
    from matplotlib import colormaps
    cmap = colormaps["YlOrRd"]
    return [tuple(int(round(255 * v)) for v in cmap(0.15 + 0.85 * i / max(n - 1, 1))[:3]) for i in range(n)]


def render_heatmap(grid: CellGrid, bins: Sequence = DEFAULT_BINS, out="heatmap.png", image=None,
                   alpha: float = 0.45) -> dict[str, Path]:
    """Colour every cell by its count bin over the image (or a grey canvas).

    Writes the overlay, a cell table next to it and, when truths are known, the
    per-cell truth-versus-prediction series as a table and a plot.
    """
    out = Path(out)
    bins = tuple(bins)
    idx = [bin_index(c.pred, bins) for c in grid.cells]
    colours = bin_colours(len(bins))
    H, W = grid.image_size
    rows, cols = grid.shape
    canvas_h, canvas_w = rows * grid.cell_size, cols * grid.cell_size
    if image is not None:
        pixels = image.pixels if isinstance(image, ImageTile) else np.asarray(image)
        base = Image.fromarray(pad_to_multiple(pixels, grid.cell_size)[:canvas_h, :canvas_w]).convert("RGBA")
    else:
        base = Image.new("RGBA", (canvas_w, canvas_h), (200, 200, 200, 255))
    overlay = Image.new("RGBA", base.size, (0, 0, 0, 0))
    draw = ImageDraw.Draw(overlay)
    a = int(round(255 * alpha))
    for c, i in zip(grid.cells, idx):
        box = (c.x0, c.y0, c.x0 + grid.cell_size - 1, c.y0 + grid.cell_size - 1)
        draw.rectangle(box, fill=colours[i] + (a,), outline=(0, 0, 0, 255), width=2)
    composed = Image.alpha_composite(base, overlay)
    text = ImageDraw.Draw(composed)
    font = ImageFont.load_default()
    for c in grid.cells:
        text.text((c.x0 + 8, c.y0 + 8), str(c.pred), fill=(0, 0, 0, 255), font=font)

    used = sorted(set(idx))
    legend_w = 150
    sheet = Image.new("RGBA", (canvas_w + legend_w, max(canvas_h, 30 + 24 * len(used))), (255, 255, 255, 255))
    sheet.paste(composed, (0, 0))
    ld = ImageDraw.Draw(sheet)
    ld.text((canvas_w + 10, 8), "count", fill=(0, 0, 0, 255), font=font)
    for k, i in enumerate(used):
        y = 30 + 24 * k
        ld.rectangle((canvas_w + 10, y, canvas_w + 30, y + 16), fill=colours[i] + (255,), outline=(0, 0, 0, 255))
        ld.text((canvas_w + 38, y + 2), bin_label(bins[i]), fill=(0, 0, 0, 255), font=font)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        sheet.convert("RGB").save(out)
    except OSError as exc:
        raise OSError(f"cannot write heatmap {out}: {exc}") from exc
    paths = {"heatmap": out, "cells": write_cell_table(grid, out.with_name(out.stem + "_cells.tsv"))}
    if grid.truth_total is not None:
        paths.update(_write_series(grid, out))
    return paths


def _write_series(grid: CellGrid, out: Path) -> dict[str, Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = out.with_name(out.stem + "_series.tsv")
    lines = ["cell\trow\tcol\ttruth\tpred"]
    for k, c in enumerate(grid.cells):
        lines.append(f"{k}\t{c.row}\t{c.col}\t{c.truth}\t{c.pred}")
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    fig, ax = plt.subplots(figsize=(max(6, len(grid.cells) * 0.3), 3.5))
    x = np.arange(len(grid.cells))
    ax.plot(x, [c.truth for c in grid.cells], "o-", color="tab:blue", label=f"truth ({grid.truth_total})")
    ax.plot(x, [c.pred for c in grid.cells], "s-", color="tab:red", label=f"predicted ({grid.predicted_total})")
    ax.set_xlabel("cell")
    ax.set_ylabel("buildings")
    ax.legend()
    fig.tight_layout()
    plot = out.with_name(out.stem + "_series.png")
    fig.savefig(plot, dpi=100)
    plt.close(fig)
    return {"series_table": table, "series_plot": plot}


def cells_per_km2(cell_size: int = CELL_SIZE, meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL) -> float:
    return 1.0 / (cell_size * meters_per_pixel / 1000.0) ** 2


def grid_shape(height: int, width: int, cell_size: int = CELL_SIZE) -> tuple[int, int]:
    return math.ceil(height / cell_size), math.ceil(width / cell_size)
