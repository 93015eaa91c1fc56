"""Column-height fields, three-segment relative height loss (RHLV), the
height-difference ratio (RHDR), and axial height-loss exports.

Column heights use the vertical extent (max - min + 1 rows) rather than the
voxel count, so interior holes from windowing or thresholding cannot
deflate anatomical height. RHLV compares a pseudo-healthy (generated)
height field against the observed one on the generated footprint; columns
the observed body lost entirely count as full loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class QuantError(ValueError):
    pass


@dataclass
class HeightField:
    heights: np.ndarray   # mm, over (anterior-posterior, lateral) columns
    footprint: np.ndarray  # bool, columns with any labelled voxel
    spacing: tuple


@dataclass
class RHLVRecord:
    vertebra: int
    rhlv_anterior: float
    rhlv_middle: float
    rhlv_posterior: float
    rhlv_avg: float
    h_gen_mm: float
    h_ori_mm: float
    h_gen_segments: tuple
    h_ori_segments: tuple
    mode: str = ""

    @property
    def triple(self):
        return (self.rhlv_anterior, self.rhlv_middle, self.rhlv_posterior)


def column_height_field(seg3d: np.ndarray, spacing) -> HeightField:
    """Vertical extent per (y, z) column of a binary/label 3-D mask."""
    mask = np.asarray(seg3d) > 0
    if not mask.any():
        raise QuantError("empty segmentation")
    footprint = mask.any(axis=0)
    min_x = mask.argmax(axis=0)
    max_x = mask.shape[0] - 1 - mask[::-1].argmax(axis=0)
    heights = np.where(footprint, (max_x - min_x + 1) * float(spacing[0]), 0.0)
    return HeightField(heights, footprint, tuple(spacing))


def split_three_segments(footprint: np.ndarray):
    """Partition a footprint into anterior/middle/posterior thirds of its
    bounding box along the anterior-posterior axis (remainder columns go to
    the middle)."""
    fp = np.asarray(footprint).astype(bool)
    if not fp.any():
        raise QuantError("empty footprint")
    ys = np.nonzero(fp.any(axis=1))[0]
    y0, y1 = int(ys.min()), int(ys.max())
    extent = y1 - y0 + 1
    if extent < 3:
        raise QuantError(f"anterior-posterior extent {extent} < 3 columns")
    base = extent // 3
    cuts = (y0, y0 + base, y1 + 1 - base, y1 + 1)
    masks = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        m = np.zeros_like(fp)
        m[a:b] = fp[a:b]
        masks.append(m)
    return tuple(masks)


def _mean_over(heights: np.ndarray, support: np.ndarray) -> float:
    if not support.any():
        return 0.0
    return float(heights[support].mean())


def compute_rhlv(gen_field: HeightField, ori_field: HeightField, vertebra: int = 0,
                 mode: str = "") -> RHLVRecord:
    """Relative height loss (H_gen - H_ori) / H_gen per segment and overall.

    Averages run over the generated footprint: the pseudo-healthy body
    defines the pre-fracture support.
    """
    if gen_field.heights.shape != ori_field.heights.shape:
        raise QuantError("height fields are on different grids")
    support = gen_field.footprint
    segments = split_three_segments(support)
    h_gen_segs, h_ori_segs, rhlvs = [], [], []
    for seg in segments:
        hg = _mean_over(gen_field.heights, seg)
        ho = _mean_over(ori_field.heights, seg)
        if hg <= 0:
            raise QuantError("generated mean height is zero in a segment")
        h_gen_segs.append(hg)
        h_ori_segs.append(ho)
        rhlvs.append((hg - ho) / hg)
    h_gen = _mean_over(gen_field.heights, support)
    h_ori = _mean_over(ori_field.heights, support)
    if h_gen <= 0:
        raise QuantError("generated mean height is zero")
    return RHLVRecord(
        vertebra=vertebra,
        rhlv_anterior=rhlvs[0],
        rhlv_middle=rhlvs[1],
        rhlv_posterior=rhlvs[2],
        rhlv_avg=(h_gen - h_ori) / h_gen,
        h_gen_mm=h_gen,
        h_ori_mm=h_ori,
        h_gen_segments=tuple(h_gen_segs),
        h_ori_segments=tuple(h_ori_segs),
        mode=mode,
    )


def compute_rhdr(gen_field: HeightField, ori_field: HeightField) -> float:
    """|H_gen - H_ori| / H_gen as a percentage, overall means."""
    record = compute_rhlv(gen_field, ori_field)
    return abs(record.rhlv_avg) * 100.0


def hmin_hmax_ratio(ori_field: HeightField) -> float:
    """Min/max of the three segment mean heights of the observed body
    (generation-independent feature used in the classifier ablation)."""
    segments = split_three_segments(ori_field.footprint)
    means = [_mean_over(ori_field.heights, seg) for seg in segments]
    top = max(means)
    if top <= 0:
        raise QuantError("observed body has zero segment heights")
    return min(means) / top


def export_heatmap_curve(gen_field: HeightField, ori_field: HeightField, out_dir,
                         prefix: str = "vert") -> dict:
    """Write the per-column relative-loss CSV, the axial heatmap image, and
    the anterior->posterior mean-loss curve (CSV + image).

    Returns the written paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    support = gen_field.footprint
    loss = np.zeros_like(gen_field.heights)
    loss[support] = (
        gen_field.heights[support] - ori_field.heights[support]
    ) / gen_field.heights[support]

    columns_csv = out_dir / f"{prefix}_columns.csv"
    with open(columns_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "z", "height_loss"])
        for y, z in zip(*np.nonzero(support)):
            writer.writerow([int(y), int(z), f"{loss[y, z]:.6f}"])

    heatmap_png = out_dir / f"{prefix}_heatmap.png"
    fig, ax = plt.subplots(figsize=(4, 4))
    shown = np.ma.masked_where(~support, loss)
    im = ax.imshow(shown.T, origin="lower", cmap="inferno", vmin=0.0)
    ax.set_xlabel("anterior -> posterior")
    ax.set_ylabel("lateral")
    fig.colorbar(im, ax=ax, label="relative height loss")
    fig.savefig(heatmap_png, dpi=100)
    plt.close(fig)

    ys = np.nonzero(support.any(axis=1))[0]
    curve = []
    for y in ys:
        sel = support[y]
        curve.append(float(loss[y, sel].mean()))
    curve_csv = out_dir / f"{prefix}_curve.csv"
    with open(curve_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "mean_height_loss"])
        for y, v in zip(ys, curve):
            writer.writerow([int(y), f"{v:.6f}"])

    curve_png = out_dir / f"{prefix}_curve.png"
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(ys, curve, marker="o", ms=3)
    ax.set_xlabel("anterior -> posterior position")
    ax.set_ylabel("mean relative height loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(curve_png, dpi=100)
    plt.close(fig)

    return {
        "columns_csv": columns_csv,
        "heatmap_png": heatmap_png,
        "curve_csv": curve_csv,
        "curve_png": curve_png,
    }


RHLV_CSV_FIELDS = [
    "case_id", "vertebra", "mode",
    "rhlv_anterior", "rhlv_middle", "rhlv_posterior", "rhlv_avg",
    "H_gen_mm", "H_ori_mm", "rhdr_pct",
]


def write_rhlv_csv(path, rows) -> None:
    """rows: iterables of (case_id, RHLVRecord)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RHLV_CSV_FIELDS)
        for case_id, rec in rows:
            writer.writerow([
                case_id, rec.vertebra, rec.mode,
                f"{rec.rhlv_anterior:.6f}", f"{rec.rhlv_middle:.6f}",
                f"{rec.rhlv_posterior:.6f}", f"{rec.rhlv_avg:.6f}",
                f"{rec.h_gen_mm:.4f}", f"{rec.h_ori_mm:.4f}",
                f"{abs(rec.rhlv_avg) * 100.0:.4f}",
            ])


def read_rhlv_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = RHLVRecord(
                vertebra=int(row["vertebra"]),
                rhlv_anterior=float(row["rhlv_anterior"]),
                rhlv_middle=float(row["rhlv_middle"]),
                rhlv_posterior=float(row["rhlv_posterior"]),
                rhlv_avg=float(row["rhlv_avg"]),
                h_gen_mm=float(row["H_gen_mm"]),
                h_ori_mm=float(row["H_ori_mm"]),
                h_gen_segments=(),
                h_ori_segments=(),
                mode=row["mode"],
            )
            out.append((row["case_id"], rec))
    return out
