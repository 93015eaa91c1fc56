"""Geometric preprocessing: intensity windowing, spine straightening,
pedicle removal, fixed-slot vertebra masking, and sagittal patch extraction.

The masked canvas replaces the target vertebra's rows with a zero slot of
fixed physical height (default 40 mm) so the network sees no residual
height cue; the canvas is recentred so the slot sits in the middle of the
frame and every preserved row is a bit-exact copy of the source patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .phantom import CaseMetadata, LabelVolume, Volume

WINDOW_LO_HU = -300.0
WINDOW_HI_HU = 800.0
DEFAULT_H_MAX_MM = 40.0


class PreprocessError(ValueError):
    pass


@dataclass
class NormalizedVolume:
    data: np.ndarray
    spacing: tuple
    window: tuple = (WINDOW_LO_HU, WINDOW_HI_HU)


def window_intensity(vol: Volume, window=(WINDOW_LO_HU, WINDOW_HI_HU)) -> NormalizedVolume:
    """Clamp HU into the window and rescale to [0, 1]."""
    lo, hi = window
    data = np.clip((vol.data.astype(np.float32) - lo) / (hi - lo), 0.0, 1.0)
    return NormalizedVolume(data, vol.spacing, (lo, hi))


def compute_position_ratio(i: int, n: int) -> float:
    """Normalised distance of slice ``i`` from the stack centre: |2i-N|/N."""
    if n < 1:
        raise PreprocessError(f"slice count must be >= 1, got {n}")
    if not 0 <= i < n:
        raise PreprocessError(f"slice index {i} outside [0, {n})")
    return abs(2 * i - n) / n


def _border_median(data: np.ndarray) -> float:
    faces = [data[0], data[-1], data[:, 0], data[:, -1], data[:, :, 0], data[:, :, -1]]
    return float(np.median(np.concatenate([f.ravel() for f in faces])))


def _shift_plane(plane: np.ndarray, dy: int, dz: int, fill):
    out = np.full_like(plane, fill)
    ys = slice(max(0, dy), plane.shape[0] + min(0, dy))
    yd = slice(max(0, -dy), plane.shape[0] + min(0, -dy))
    zs = slice(max(0, dz), plane.shape[1] + min(0, dz))
    zd = slice(max(0, -dz), plane.shape[1] + min(0, -dz))
    out[ys, zs] = plane[yd, zd]
    return out


def straighten_spine(vol: Volume, labels: LabelVolume):
    """Translate each axial slab so the fitted centerline runs vertically
    through the volume centre. Labels get the identical integer shifts."""
    labs = labels.labels()
    if len(labs) < 2:
        raise PreprocessError("need at least 2 labelled vertebrae to fit a centerline")

    centroids = ndimage.center_of_mass(np.ones_like(labels.data), labels.data, labs)
    centroids = sorted(centroids, key=lambda c: c[0])
    cx = np.array([c[0] for c in centroids])
    cy = np.array([c[1] for c in centroids])
    cz = np.array([c[2] for c in centroids])

    X, Y, Z = labels.data.shape
    rows = np.arange(X)
    line_y = np.interp(rows, cx, cy)
    line_z = np.interp(rows, cx, cz)
    dy = np.round((Y - 1) / 2.0 - line_y).astype(int)
    dz = np.round((Z - 1) / 2.0 - line_z).astype(int)

    fill = _border_median(vol.data)
    new_vol = np.empty_like(vol.data)
    new_lab = np.empty_like(labels.data)
    for r in range(X):
        new_vol[r] = _shift_plane(vol.data[r], dy[r], dz[r], fill)
        new_lab[r] = _shift_plane(labels.data[r], dy[r], dz[r], 0)
    return Volume(new_vol, vol.spacing), LabelVolume(new_lab, labels.spacing)


@dataclass
class PedicleRemoval:
    labels: LabelVolume
    split_layers: dict  # label -> first removed coronal layer (None if no split)

    def warnings(self):
        return [lab for lab, layer in self.split_layers.items() if layer is None]


_MIN_SPLIT_COMPONENT = 4


def _splits_laterally(section: np.ndarray) -> bool:
    """True when the in-plane footprint separates into left/right parts.

    The arch root bifurcates laterally; integer-shift striping from
    straightening separates rows vertically with identical lateral extent,
    so requiring a lateral gap between sizeable components rejects it.
    """
    comp, n = ndimage.label(section)
    if n < 2:
        return False
    sizes = np.bincount(comp.ravel())[1:]
    extents = []
    for c in range(1, n + 1):
        if sizes[c - 1] < _MIN_SPLIT_COMPONENT:
            continue
        zs = np.nonzero((comp == c).any(axis=0))[0]
        extents.append((int(zs.min()), int(zs.max())))
    if len(extents) < 2:
        return False
    extents.sort()
    return any(b0 > a1 + 1 for (_, a1), (b0, _) in zip(extents[:-1], extents[1:]))


def remove_pedicles(labels: LabelVolume) -> PedicleRemoval:
    """Zero each label from the first coronal layer where its in-plane
    footprint splits into two or more connected components (the arch root).

    Labels that never split are kept whole and flagged.
    """
    data = labels.data.copy()
    split_layers = {}
    for lab in labels.labels():
        mask = labels.data == lab
        ys = np.nonzero(mask.any(axis=(0, 2)))[0]
        split = None
        for y in ys:
            if _splits_laterally(mask[:, y, :]):
                split = int(y)
                break
        split_layers[int(lab)] = split
        if split is not None:
            sel = data[:, split:, :] == lab
            data[:, split:, :][sel] = 0
    return PedicleRemoval(LabelVolume(data, labels.spacing), split_layers)


def extract_sagittal_patch(nvol: NormalizedVolume, body_labels: LabelVolume, vert_id: int,
                           slice_index: int, patch_size: int = 256):
    """Crop a sagittal slice to ``patch_size`` rows/cols centred on the
    target body's centroid, zero-padding overflow.

    Returns ``(patch, seg_patch, ratio)`` where ratio encodes the slice's
    position inside the target body's lateral extent.
    """
    mask = body_labels.data == vert_id
    if not mask.any():
        raise PreprocessError(f"label {vert_id} absent from body labels")
    zs = np.nonzero(mask.any(axis=(0, 1)))[0]
    z0, z1 = int(zs.min()), int(zs.max())
    if not z0 <= slice_index <= z1:
        raise PreprocessError(
            f"slice {slice_index} outside target extent [{z0}, {z1}]"
        )
    ratio = compute_position_ratio(slice_index - z0, z1 - z0 + 1)

    cx, cy, _ = ndimage.center_of_mass(mask)
    r0 = int(round(cx)) - patch_size // 2
    c0 = int(round(cy)) - patch_size // 2

    patch = np.zeros((patch_size, patch_size), dtype=nvol.data.dtype)
    seg = np.zeros((patch_size, patch_size), dtype=body_labels.data.dtype)
    X, Y = nvol.data.shape[:2]
    rs, re = max(0, r0), min(X, r0 + patch_size)
    cs, ce = max(0, c0), min(Y, c0 + patch_size)
    patch[rs - r0 : re - r0, cs - c0 : ce - c0] = nvol.data[rs:re, cs:ce, slice_index]
    seg[rs - r0 : re - r0, cs - c0 : ce - c0] = body_labels.data[rs:re, cs:ce, slice_index]
    return patch, seg, ratio


@dataclass
class MaskedCanvas:
    """A sagittal patch with the target vertebra replaced by a fixed slot."""

    image: np.ndarray
    mask: np.ndarray
    ratio: float
    x_upper: int          # first target row in the source patch
    x_lower: int          # one past the last target row in the source patch
    h_real: float         # mm
    h_max: float          # mm
    spacing: float        # row spacing, mm
    slot_start: int
    slot_rows: int
    upper_rows: int       # source rows preserved above the slot
    lower_rows: int       # source rows preserved below the slot

    @property
    def slot_end(self) -> int:
        return self.slot_start + self.slot_rows

    def model_input(self) -> np.ndarray:
        """Channel stack (image, mask, constant ratio plane)."""
        ratio_plane = np.full_like(self.image, self.ratio)
        return np.stack([self.image, self.mask.astype(self.image.dtype), ratio_plane])

    def ct_upper(self) -> np.ndarray:
        return self.image[: self.slot_start]

    def ct_lower(self) -> np.ndarray:
        return self.image[self.slot_end :]


@dataclass
class TrainingCanvasPair:
    input: MaskedCanvas
    target_image: np.ndarray
    target_seg: np.ndarray
    ahvs_target: np.ndarray


def slot_rows_for(h_max_mm: float, spacing_mm: float) -> int:
    return int(round(h_max_mm / spacing_mm))


def centered_offset(outer: int, inner: int) -> int:
    return (outer - inner) // 2


def build_masked_canvas(patch: np.ndarray, seg: np.ndarray, vert_id: int, ratio: float,
                        spacing_mm: float, h_max_mm: float = DEFAULT_H_MAX_MM,
                        healthy_labels=None, with_target: bool = False):
    """Remove the target vertebra's rows and insert a zero slot of
    ``round(h_max/spacing)`` rows, recentring to the patch frame.

    With ``with_target=True`` also returns the training pair: the real
    vertebra rows re-inserted centred in the slot, its binary map, and the
    map of the other intact vertebrae.
    """
    size = patch.shape[0]
    if patch.shape != seg.shape:
        raise PreprocessError("patch and segmentation shapes differ")
    target_rows = np.nonzero((seg == vert_id).any(axis=1))[0]
    if target_rows.size == 0:
        raise PreprocessError(f"label {vert_id} absent from patch")
    x_upper = int(target_rows.min())
    x_lower = int(target_rows.max()) + 1
    h_rows = x_lower - x_upper
    h_real = h_rows * spacing_mm
    if h_real >= h_max_mm:
        raise PreprocessError(
            f"real height {h_real:.1f} mm >= slot height {h_max_mm:.1f} mm"
        )
    slot_rows = slot_rows_for(h_max_mm, spacing_mm)
    if slot_rows > size:
        raise PreprocessError(
            f"slot of {slot_rows} rows cannot fit a {size}-row canvas"
        )

    slot_start = centered_offset(size, slot_rows)
    slot_end = slot_start + slot_rows
    n_up = min(slot_start, x_upper)
    n_lo = min(size - slot_end, size - x_lower)

    image = np.zeros_like(patch)
    image[slot_start - n_up : slot_start] = patch[x_upper - n_up : x_upper]
    image[slot_end : slot_end + n_lo] = patch[x_lower : x_lower + n_lo]
    mask = np.zeros(patch.shape, dtype=np.uint8)
    mask[slot_start:slot_end] = 1

    canvas = MaskedCanvas(
        image=image, mask=mask, ratio=float(ratio),
        x_upper=x_upper, x_lower=x_lower, h_real=float(h_real), h_max=float(h_max_mm),
        spacing=float(spacing_mm), slot_start=slot_start, slot_rows=slot_rows,
        upper_rows=n_up, lower_rows=n_lo,
    )
    if not with_target:
        return canvas

    insert = slot_start + centered_offset(slot_rows, h_rows)
    target_image = image.copy()
    target_image[insert : insert + h_rows] = patch[x_upper:x_lower]
    target_seg = np.zeros(patch.shape, dtype=np.uint8)
    target_seg[insert : insert + h_rows] = seg[x_upper:x_lower] == vert_id

    if healthy_labels is None:
        others = (seg > 0) & (seg != vert_id)
    else:
        others = np.isin(seg, [l for l in healthy_labels if l != vert_id])
    ahvs = np.zeros(patch.shape, dtype=np.uint8)
    ahvs[slot_start - n_up : slot_start] = others[x_upper - n_up : x_upper]
    ahvs[slot_end : slot_end + n_lo] = others[x_lower : x_lower + n_lo]

    return canvas, TrainingCanvasPair(canvas, target_image, target_seg, ahvs)


@dataclass
class VertebraCanvases:
    """All sagittal canvases of one vertebra, ready for training/synthesis."""

    label: int
    grade: int
    slices: list = field(default_factory=list)        # z indices
    canvases: list = field(default_factory=list)      # MaskedCanvas
    pairs: list = field(default_factory=list)         # TrainingCanvasPair


def preprocess_case(vol: Volume, labels: LabelVolume, meta: CaseMetadata,
                    h_max_mm: float = DEFAULT_H_MAX_MM, patch_size: int = 256,
                    straighten: bool = True, targets=None):
    """Run the geometric pipeline on a case and build per-vertebra canvases.

    Returns ``(per_vertebra, context)`` where per_vertebra maps label ->
    :class:`VertebraCanvases` and context carries the straightened volume,
    body-only labels and the normalised volume for downstream reassembly.
    """
    if straighten:
        vol_s, labels_s = straighten_spine(vol, labels)
    else:
        vol_s, labels_s = vol, labels
    removal = remove_pedicles(labels_s)
    body = removal.labels
    nvol = window_intensity(vol_s)

    healthy = set(meta.healthy_labels())
    per_vertebra = {}
    wanted = set(targets) if targets is not None else {v.label for v in meta.vertebrae}
    for v in meta.vertebrae:
        if v.label not in wanted:
            continue
        mask = body.data == v.label
        if not mask.any():
            continue
        zs = np.nonzero(mask.any(axis=(0, 1)))[0]
        vc = VertebraCanvases(label=v.label, grade=v.genant_grade)
        for z in range(int(zs.min()), int(zs.max()) + 1):
            if not mask[:, :, z].any():
                continue
            patch, seg, ratio = extract_sagittal_patch(nvol, body, v.label, z, patch_size)
            canvas, pair = build_masked_canvas(
                patch, seg, v.label, ratio, nvol.spacing[0], h_max_mm,
                healthy_labels=healthy, with_target=True,
            )
            vc.slices.append(z)
            vc.canvases.append(canvas)
            vc.pairs.append(pair)
        if vc.slices:
            per_vertebra[v.label] = vc

    context = {
        "volume": vol_s,
        "labels": labels_s,
        "body_labels": body,
        "normalized": nvol,
        "split_layers": removal.split_layers,
    }
    return per_vertebra, context


def save_canvases(out_dir, per_vertebra, meta: CaseMetadata) -> None:
    """Write per-vertebra NPZ bundles plus a JSON index (CLI surface)."""
    import json
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for label, vc in sorted(per_vertebra.items()):
        rows = {
            "masked": np.stack([c.image for c in vc.canvases]).astype(np.float32),
            "mask": np.stack([c.mask for c in vc.canvases]).astype(np.uint8),
            "ratio": np.array([c.ratio for c in vc.canvases], dtype=np.float32),
            "h_real": np.array([c.h_real for c in vc.canvases], dtype=np.float32),
            "slot_start": np.array([c.slot_start for c in vc.canvases], dtype=np.int32),
            "slot_rows": np.array([c.slot_rows for c in vc.canvases], dtype=np.int32),
            "x_upper": np.array([c.x_upper for c in vc.canvases], dtype=np.int32),
            "x_lower": np.array([c.x_lower for c in vc.canvases], dtype=np.int32),
            "slices": np.array(vc.slices, dtype=np.int32),
            "target": np.stack([p.target_image for p in vc.pairs]).astype(np.float32),
            "target_seg": np.stack([p.target_seg for p in vc.pairs]).astype(np.uint8),
            "ahvs": np.stack([p.ahvs_target for p in vc.pairs]).astype(np.uint8),
        }
        path = out_dir / f"vert_{label:02d}.npz"
        np.savez_compressed(path, **rows)
        index.append(
            {
                "label": int(label),
                "grade": int(vc.grade),
                "healthy": bool(vc.grade == 0),
                "n_slices": len(vc.slices),
                "spacing_mm": float(meta.spacing[0]),
                "file": path.name,
            }
        )
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
