"""Counting evaluation: total/mean absolute error per count band and R^2."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import BANDS, band_of

RESIDUAL_COLUMNS = ("id", "truth", "prediction", "abs_error", "band")
BAND_COLUMNS = ("band", "range", "images", "structures", "tae")

# Reference test-set composition reported for the original corpus (documentation only).
REFERENCE_TEST_SET = {"images": {"LOW": 416, "MEDIUM": 100, "HIGH": 15},
                      "structures": {"LOW": 3880, "MEDIUM": 3937, "HIGH": 1128}}


@dataclass(frozen=True)
class Residual:
    id: str
    truth: int
    prediction: float
    abs_error: float
    band: str


@dataclass(frozen=True)
class EvalReport:
    n_images: int
    tae_low: float
    tae_medium: float
    tae_high: float
    tae_total: float
    mae: float
    r2: float  # nan when all truths are equal
    residuals: tuple[Residual, ...] = ()
    notes: tuple[str, ...] = field(default=())

    @property
    def band_tae(self) -> dict[str, float]:
        return {"LOW": self.tae_low, "MEDIUM": self.tae_medium, "HIGH": self.tae_high}


def evaluate(predictions: Sequence[tuple], ids: Optional[Sequence[str]] = None,
             rounded: bool = False) -> EvalReport:
    """Evaluate ``(truth, prediction)`` pairs.

    Bands are assigned by the true count. With ``rounded`` predictions are first
    mapped to ``max(0, round(p))``.
    """
    if len(predictions) == 0:
        raise ValueError("cannot evaluate an empty prediction list")
    truths = np.array([int(t) for t, _ in predictions], dtype=np.int64)
    preds = np.array([float(p) for _, p in predictions], dtype=np.float64)
    if (truths < 0).any():
        raise ValueError("ground-truth counts must be non-negative")
    if rounded:
        preds = np.maximum(0.0, np.round(preds))
    if ids is None:
        ids = [str(i) for i in range(len(truths))]
    err = np.abs(truths - preds)
    bands = [band_of(int(t)).name for t in truths]
    tae = {b.name: 0.0 for b in BANDS}
    for b, e in zip(bands, err):
        tae[b] += float(e)
    total = tae["LOW"] + tae["MEDIUM"] + tae["HIGH"]
    notes = []
    ss_tot = float(np.sum((truths - truths.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = float("nan")
        notes.append("R^2 undefined: all ground-truth counts are identical")
    else:
        r2 = 1.0 - float(np.sum((truths - preds) ** 2)) / ss_tot
    residuals = tuple(Residual(str(i), int(t), float(p), float(e), b)
                      for i, t, p, e, b in zip(ids, truths, preds, err, bands))
    return EvalReport(len(truths), tae["LOW"], tae["MEDIUM"], tae["HIGH"], total, total / len(truths),
                      r2, residuals, tuple(notes))


def band_rows(report: EvalReport) -> list[dict]:
    rows = []
    for b in BANDS:
        members = [r for r in report.residuals if r.band == b.name]
        rng = f"{b.lower} to {b.upper}" if b.upper is not None else f"> {b.lower - 1}"
        rows.append({"band": b.name, "range": rng, "images": len(members),
                     "structures": sum(r.truth for r in members), "tae": report.band_tae[b.name]})
    return rows


def band_report(report: EvalReport) -> str:
    """Plain-text table in the layout of the per-band error summary."""
    lines = [f"{'Count band':<28}{'images':>8}{'structures':>12}{'TAE':>12}"]
    for row in band_rows(report):
        label = f"{row['band'].title()}-Count ({row['range']})"
        lines.append(f"{label:<28}{row['images']:>8}{row['structures']:>12}{row['tae']:>12.2f}")
    lines.append(f"{'Total':<28}{report.n_images:>8}{sum(r.truth for r in report.residuals):>12}"
                 f"{report.tae_total:>12.2f}")
    lines.append(f"MAE (TAE / images): {report.mae:.4f}")
    lines.append("R^2: " + ("n/a" if math.isnan(report.r2) else f"{report.r2:.4f}"))
    lines.extend(f"note: {n}" for n in report.notes)
    return "\n".join(lines)


def write_report(report: EvalReport, out_dir, stem: str = "eval") -> dict[str, Path]:
    """Write ``<stem>_bands.tsv``, ``<stem>_residuals.tsv`` and ``<stem>_summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bands = out / f"{stem}_bands.tsv"
    with open(bands, "w", encoding="utf-8") as fh:
        fh.write("\t".join(BAND_COLUMNS) + "\n")
        for row in band_rows(report):
            fh.write("\t".join(str(row[c]) if c != "tae" else repr(row[c]) for c in BAND_COLUMNS) + "\n")
    residuals = out / f"{stem}_residuals.tsv"
    with open(residuals, "w", encoding="utf-8") as fh:
        fh.write("\t".join(RESIDUAL_COLUMNS) + "\n")
        for r in report.residuals:
            fh.write(f"{r.id}\t{r.truth}\t{r.prediction!r}\t{r.abs_error!r}\t{r.band}\n")
    summary = out / f"{stem}_summary.txt"
    summary.write_text(
        f"n_images: {report.n_images}\n"
        f"tae_low: {report.tae_low!r}\ntae_medium: {report.tae_medium!r}\ntae_high: {report.tae_high!r}\n"
        f"tae_total: {report.tae_total!r}\nmae: {report.mae!r}\nr2: {report.r2!r}\n"
        + "".join(f"note: {n}\n" for n in report.notes)
        + "\n" + band_report(report) + "\n", encoding="utf-8")
    return {"bands": bands, "residuals": residuals, "summary": summary}
