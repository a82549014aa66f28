"""Disparity evaluation metrics with validity masking, plus table emitters.

All thresholds use strict inequality (>). Pixels whose mask is false never
enter a numerator or denominator.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class EmptyMaskError(ValueError):
    """No valid pixels to evaluate."""


def _prepare(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f"metric inputs disagree: {pred.shape}, {gt.shape}, {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("no valid pixels")
    return pred[mask], gt[mask]


def epe(pred, gt, mask) -> float:
    """Mean absolute disparity error over valid pixels, in pixels."""
    p, g = _prepare(pred, gt, mask)
    return float(np.abs(p - g).mean())


def d1(pred, gt, mask) -> float:
    """Percent of valid pixels with error > 3 px AND > 5% of ground truth."""
    p, g = _prepare(pred, gt, mask)
    err = np.abs(p - g)
    bad = (err > 3.0) & (err > 0.05 * g)
    return float(100.0 * bad.mean())


def bad_x(pred, gt, mask, x: float) -> float:
    """Percent of valid pixels with error > x px."""
    p, g = _prepare(pred, gt, mask)
    return float(100.0 * (np.abs(p - g) > x).mean())


@dataclass
class MetricReport:
    epe: float
    d1: float
    bad: dict[float, float]
    pixel_count: int


def report(pred, gt, mask, thresholds: tuple[float, ...] = (1.0, 2.0, 3.0)) -> MetricReport:
    """Bundle EPE, D1 and Bad-X at the given thresholds."""
    n = int(np.asarray(mask, dtype=bool).sum())
    return MetricReport(
        epe=epe(pred, gt, mask),
        d1=d1(pred, gt, mask),
        bad={t: bad_x(pred, gt, mask, t) for t in thresholds},
        pixel_count=n,
    )


# --- table emitters -----------------------------------------------------------------

def _columns(rows: list[tuple[str, MetricReport, int | None]]) -> list[str]:
    thresholds = sorted({t for _, r, _ in rows for t in r.bad})
    cols = ["D1", "EPE"] + [f"Bad {t:g}" for t in thresholds]
    if any(macs is not None for _, _, macs in rows):
        cols.append("MACs (G)")
    return cols


def _cells(rep: MetricReport, cols: list[str], macs: int | None) -> list[str]:
    out = []
    for c in cols:
        if c == "D1":
            out.append(f"{rep.d1:.2f}")
        elif c == "EPE":
            out.append(f"{rep.epe:.2f}")
        elif c.startswith("Bad"):
            t = float(c.split()[1])
            out.append(f"{rep.bad[t]:.2f}" if t in rep.bad else "")
        else:
            out.append(f"{macs / 1e9:.1f}" if macs is not None else "")
    return out


def metrics_table_markdown(rows: list[tuple[str, MetricReport, int | None]]) -> str:
    """Datasets-by-metrics markdown table (one row per dataset/split)."""
    cols = _columns(rows)
    lines = ["| Dataset | " + " | ".join(cols) + " |",
             "|---" * (len(cols) + 1) + "|"]
    for name, rep, macs in rows:
        lines.append("| " + " | ".join([name] + _cells(rep, cols, macs)) + " |")
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows: list[tuple[str, MetricReport, int | None]]) -> None:
    cols = _columns(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset"] + cols)
        for name, rep, macs in rows:
            writer.writerow([name] + _cells(rep, cols, macs))
