"""Synthetic spine CT phantom with ground-truth labels and controllable
compression fractures.

Axis convention used throughout the package:

    axis 0 (x): superior -> inferior (vertical; rows of sagittal images)
    axis 1 (y): anterior -> posterior (columns of sagittal images)
    axis 2 (z): lateral left -> right (sagittal slice index)

Each vertebra is an elliptic-cylinder body (cortical shell + trabecular
core, cortical endplates) with two pedicle rods attached posteriorly, so a
coronal sweep sees the label split from one connected component into two
exactly where the arch begins. Compression shortens body columns by a
morphology-shaped factor field and refills the freed rows with soft tissue.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nifti import NiftiError, read_nifti, write_nifti

MORPHOLOGIES = ("wedge", "biconcave", "crush", "uniform")

# The Genant deformity taxonomy; "uniform" is a calibration shape available
# on request but not drawn by the default sampler.
SAMPLED_MORPHOLOGIES = ("wedge", "biconcave", "crush")

# Verse2019-style grade frequencies (grade 0 is the remainder).
GRADE_FRACTIONS = {1: 141 / 1505, 2: 96 / 1505, 3: 51 / 1505}

# Peak relative-loss sampling bands per grade, kept off the Genant
# boundaries so voxel quantisation cannot flip a designed grade.
GRADE_LOSS_BANDS = {1: (0.215, 0.245), 2: (0.28, 0.38), 3: (0.43, 0.60)}

# Middle-third mean of the parabolic dip is 26/27 of its peak; the spec
# sampler bumps biconcave targets by the inverse so measured segment means
# land inside the designed grade band.
_BICONCAVE_SEGMENT_MEAN = 1.0 - 1.0 / 27.0


class PhantomError(ValueError):
    """Invalid phantom configuration or fracture request."""


def assign_genant_grade(loss: float) -> int:
    """Genant grade from relative height loss.

    0 normal (<20%), 1 mild (20-25%), 2 moderate (>25-40%), 3 severe
    (>40%). The 0.25 boundary is inclusive to mild; negative losses are
    grade 0.
    """
    if not np.isfinite(loss):
        raise PhantomError(f"height loss must be finite, got {loss}")
    if loss < 0.20:
        return 0
    if loss <= 0.25:
        return 1
    if loss <= 0.40:
        return 2
    return 3


@dataclass
class PhantomConfig:
    n_vertebrae: int = 5
    volume_shape: tuple = (192, 96, 96)
    spacing: tuple = (1.0, 1.0, 1.0)
    body_height_mm: float = 25.0
    gap_mm: float = 5.0
    curvature_amp_mm: float = 0.0
    height_gradient: float = 0.08
    height_jitter: float = 0.02
    body_radius_ap_mm: float = 10.0
    body_radius_lat_mm: float = 13.0
    arch_depth_mm: float = 12.0
    cortical_hu: float = 700.0
    trabecular_hu: float = 250.0
    soft_tissue_hu: float = 40.0
    noise_sigma_hu: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if not (5 <= self.n_vertebrae <= 12):
            raise PhantomError(f"n_vertebrae must be in [5, 12], got {self.n_vertebrae}")
        if len(self.volume_shape) != 3 or any(s < 8 for s in self.volume_shape):
            raise PhantomError(f"bad volume_shape {self.volume_shape}")
        if any(s <= 0 for s in self.spacing):
            raise PhantomError(f"spacing must be strictly positive, got {self.spacing}")
        for name in ("cortical_hu", "trabecular_hu", "soft_tissue_hu"):
            hu = getattr(self, name)
            if not (-1000.0 <= hu <= 2000.0):
                raise PhantomError(f"{name}={hu} outside [-1000, 2000] HU")
        heights = self.vertebra_heights_mm()
        stack_mm = heights.sum() + (self.n_vertebrae - 1) * self.gap_mm
        extent_mm = self.volume_shape[0] * self.spacing[0]
        if stack_mm + 2 * self.margin_mm() > extent_mm:
            raise PhantomError(
                f"{self.n_vertebrae} vertebrae need {stack_mm:.1f} mm plus margins "
                f"but the volume is only {extent_mm:.1f} mm tall"
            )

    def margin_mm(self) -> float:
        return max(2.0 * self.spacing[0], 6.0)

    def vertebra_heights_mm(self) -> np.ndarray:
        """Per-vertebra healthy heights: smooth gradient + seeded jitter."""
        n = self.n_vertebrae
        rng = np.random.default_rng((self.seed, 1))
        lin = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        jitter = rng.uniform(-self.height_jitter, self.height_jitter, n)
        return self.body_height_mm * (1.0 + self.height_gradient * lin + jitter)

    def lateral_offsets_mm(self) -> np.ndarray:
        n = self.n_vertebrae
        if n == 1:
            return np.zeros(1)
        return self.curvature_amp_mm * np.sin(np.pi * np.arange(n) / (n - 1))


@dataclass
class FractureSpec:
    vertebra_id: int
    morphology: str
    target_loss: float

    def validate(self) -> None:
        if self.morphology not in MORPHOLOGIES:
            raise PhantomError(f"unknown morphology {self.morphology!r}")
        if not (0.0 <= self.target_loss < 0.8):
            raise PhantomError(f"target_loss must be in [0, 0.8), got {self.target_loss}")


@dataclass
class VertebraInfo:
    label: int
    healthy_height_mm: float
    true_rhlv_triple: tuple = (0.0, 0.0, 0.0)
    genant_grade: int = 0
    morphology: str | None = None
    arch_start_layer: int = 0  # first coronal (y) voxel layer of the pedicles
    body_rows: tuple = (0, 0)  # [start, stop) vertical voxel extent of the body


@dataclass
class CaseMetadata:
    spacing: tuple
    vertebrae: list = field(default_factory=list)
    seed: int = 0
    soft_tissue_hu: float = 40.0
    noise_sigma_hu: float = 10.0
    case_id: str = ""

    def vertebra(self, label: int) -> VertebraInfo:
        for v in self.vertebrae:
            if v.label == label:
                return v
        raise PhantomError(f"no vertebra with label {label}")

    def healthy_labels(self) -> list:
        return [v.label for v in self.vertebrae if v.genant_grade == 0]

    def fractured_labels(self) -> list:
        return [v.label for v in self.vertebrae if v.genant_grade > 0]


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple


@dataclass
class LabelVolume:
    data: np.ndarray
    spacing: tuple

    def labels(self) -> np.ndarray:
        found = np.unique(self.data)
        return found[found > 0]


def generate_phantom(config: PhantomConfig):
    """Build a healthy spine phantom.

    Returns ``(Volume, LabelVolume, CaseMetadata)``. Vertebra labels run
    1..n from superior to inferior; label 0 is background.
    """
    config.validate()
    sx, sy, sz = config.spacing
    X, Y, Z = config.volume_shape
    rng = np.random.default_rng((config.seed, 2))

    heights = config.vertebra_heights_mm()
    offsets = config.lateral_offsets_mm()

    hu = np.full((X, Y, Z), config.soft_tissue_hu, dtype=np.float32)
    labels = np.zeros((X, Y, Z), dtype=np.int32)

    ry, rz = config.body_radius_ap_mm, config.body_radius_lat_mm
    # Body centre leaves room for the posterior arch.
    yc_mm = Y * sy / 2.0 - config.arch_depth_mm / 2.0
    z_mid_mm = Z * sz / 2.0

    y_mm = (np.arange(Y) + 0.5) * sy
    z_mm = (np.arange(Z) + 0.5) * sz

    meta = CaseMetadata(
        spacing=tuple(config.spacing),
        seed=config.seed,
        soft_tissue_hu=config.soft_tissue_hu,
        noise_sigma_hu=config.noise_sigma_hu,
    )

    top_mm = config.margin_mm()
    for i in range(config.n_vertebrae):
        label = i + 1
        h_mm = heights[i]
        zc_mm = z_mid_mm + offsets[i]

        x0 = int(round(top_mm / sx))
        x1 = int(round((top_mm + h_mm) / sx))
        if x1 >= X:
            raise PhantomError("vertebra stack overflows the volume extent")
        x1 = max(x1, x0 + 2)

        r2 = ((y_mm[:, None] - yc_mm) / ry) ** 2 + ((z_mm[None, :] - zc_mm) / rz) ** 2
        body = r2 <= 1.0
        shell = body & (r2 >= 0.75**2)

        section = np.where(shell, config.cortical_hu, config.trabecular_hu)
        hu[x0:x1, body] = np.broadcast_to(section[body], (x1 - x0, int(body.sum())))
        # cortical endplates top and bottom
        hu[x0, body] = config.cortical_hu
        hu[x1 - 1, body] = config.cortical_hu
        labels[x0:x1, body] = label

        # Pedicle rods: start one coronal layer behind the last body voxel,
        # so the in-plane component count jumps from one to two there.
        body_y = np.where(body.any(axis=1))[0]
        arch_y0 = int(body_y.max()) + 1
        arch_y1 = min(Y, arch_y0 + int(round(config.arch_depth_mm / sy)))
        rod_half = max(1, int(round(2.0 / sz)))
        rod_span = max(1, int(round(7.0 / sz)))
        zc_vox = int(round(zc_mm / sz - 0.5))
        rx0 = x0 + (x1 - x0) // 5
        rx1 = x1 - (x1 - x0) // 5
        for zr in (zc_vox - rod_span, zc_vox + rod_span):
            zlo, zhi = max(0, zr - rod_half), min(Z, zr + rod_half + 1)
            hu[rx0:rx1, arch_y0:arch_y1, zlo:zhi] = config.cortical_hu
            labels[rx0:rx1, arch_y0:arch_y1, zlo:zhi] = label

        meta.vertebrae.append(
            VertebraInfo(
                label=label,
                healthy_height_mm=(x1 - x0) * sx,
                arch_start_layer=arch_y0,
                body_rows=(x0, x1),
            )
        )
        top_mm += h_mm + config.gap_mm

    hu += rng.normal(0.0, config.noise_sigma_hu, hu.shape).astype(np.float32)
    return Volume(hu, tuple(config.spacing)), LabelVolume(labels, tuple(config.spacing)), meta


def _loss_profile(morphology: str, t: np.ndarray, peak: float) -> np.ndarray:
    """Relative-loss factor along the normalised anterior->posterior axis.

    wedge/crush hold the peak over their third and ramp linearly to zero;
    biconcave is a parabolic dip; uniform is constant.
    """
    if morphology == "uniform":
        return np.full_like(t, peak)
    if morphology == "biconcave":
        return peak * np.clip(1.0 - (2.0 * t - 1.0) ** 2, 0.0, 1.0)
    if morphology == "crush":
        t = 1.0 - t
    ramp = np.clip(np.where(t <= 1.0 / 3.0, 1.0, 1.5 * (1.0 - t)), 0.0, 1.0)
    return peak * ramp


def _column_extents(body: np.ndarray):
    """Per-(y, z) column [min_x, max_x] over True voxels; -1 where empty."""
    any_col = body.any(axis=0)
    min_x = np.where(any_col, body.argmax(axis=0), -1)
    max_x = np.where(any_col, body.shape[0] - 1 - body[::-1].argmax(axis=0), -1)
    return any_col, min_x, max_x


def _segment_mean_heights(heights: np.ndarray, footprint: np.ndarray):
    """Mean column height over the footprint's anterior/middle/posterior
    thirds (thirds of the bounding box along axis 0 = anterior->posterior,
    remainder to the middle)."""
    ys = np.where(footprint.any(axis=1))[0]
    y0, y1 = int(ys.min()), int(ys.max())
    extent = y1 - y0 + 1
    base = extent // 3
    bounds = (y0, y0 + base, y1 + 1 - base, y1 + 1)
    means = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = footprint.copy()
        seg[:a] = False
        seg[b:] = False
        means.append(float(heights[seg].mean()) if seg.any() else 0.0)
    return tuple(means)


def apply_compression(vol: Volume, labels: LabelVolume, meta: CaseMetadata, spec: FractureSpec):
    """Compress one vertebral body in place of its healthy shape.

    Returns new ``(Volume, LabelVolume, CaseMetadata)``; inputs are not
    modified. The measured loss triple is recomputed by voxel counting on
    the compressed vs original label and the Genant grade follows from its
    maximum.
    """
    spec.validate()
    info = meta.vertebra(spec.vertebra_id)
    if info.genant_grade != 0:
        raise PhantomError(f"vertebra {spec.vertebra_id} is already fractured")
    if spec.vertebra_id not in labels.labels():
        raise PhantomError(f"label {spec.vertebra_id} absent from label volume")

    sx = labels.spacing[0]
    hu = vol.data.copy()
    lab = labels.data.copy()
    rng = np.random.default_rng((meta.seed, spec.vertebra_id, 0xC0))

    body = lab == spec.vertebra_id
    body[:, info.arch_start_layer:, :] = False  # posterior elements stay
    healthy_body = body.copy()

    any_col, min_x, max_x = _column_extents(body)
    ys = np.where(any_col.any(axis=1))[0]
    y0, y1 = int(ys.min()), int(ys.max())
    t = np.zeros(any_col.shape[0])
    if y1 > y0:
        t[y0 : y1 + 1] = (np.arange(y0, y1 + 1) - y0) / (y1 - y0)
    loss = _loss_profile(spec.morphology, t[y0 : y1 + 1], spec.target_loss)
    loss_by_y = np.zeros(any_col.shape[0])
    loss_by_y[y0 : y1 + 1] = loss

    for y, z in zip(*np.nonzero(any_col)):
        lo, hi = int(min_x[y, z]), int(max_x[y, z])
        h = hi - lo + 1
        h_new = max(1, int(round(h * (1.0 - loss_by_y[y]))))
        if h_new >= h:
            continue
        profile = hu[lo : hi + 1, y, z].copy()
        idx = np.clip(np.round((np.arange(h_new) + 0.5) * h / h_new - 0.5).astype(int), 0, h - 1)
        squashed = profile[idx]
        squashed[0] = profile[0]
        squashed[-1] = profile[-1]
        # inferior endplate stays put; freed superior rows become tissue
        new_lo = hi - h_new + 1
        hu[lo:new_lo, y, z] = meta.soft_tissue_hu + rng.normal(
            0.0, meta.noise_sigma_hu, new_lo - lo
        ).astype(np.float32)
        hu[new_lo : hi + 1, y, z] = squashed
        lab[lo:new_lo, y, z] = 0
        lab[new_lo : hi + 1, y, z] = spec.vertebra_id

    compressed_body = lab == spec.vertebra_id
    compressed_body[:, info.arch_start_layer:, :] = False

    h_healthy = _heights_mm(healthy_body, sx)
    h_now = _heights_mm(compressed_body, sx)
    footprint = healthy_body.any(axis=0)
    triple = tuple(
        (hh - hc) / hh if hh > 0 else 0.0
        for hh, hc in zip(
            _segment_mean_heights(h_healthy, footprint),
            _segment_mean_heights(h_now, footprint),
        )
    )

    new_meta = dataclasses.replace(
        meta, vertebrae=[dataclasses.replace(v) for v in meta.vertebrae]
    )
    target = new_meta.vertebra(spec.vertebra_id)
    target.true_rhlv_triple = triple
    target.genant_grade = assign_genant_grade(max(triple))
    target.morphology = spec.morphology if spec.target_loss > 0 else None
    return Volume(hu, vol.spacing), LabelVolume(lab, labels.spacing), new_meta


def _heights_mm(body: np.ndarray, sx: float) -> np.ndarray:
    any_col, min_x, max_x = _column_extents(body)
    heights = np.zeros(any_col.shape, dtype=float)
    heights[any_col] = (max_x[any_col] - min_x[any_col] + 1) * sx
    return heights


def grade_probabilities(balanced: bool = False) -> np.ndarray:
    """Default grade sampling distribution (clinical imbalance) or the
    balanced override for test sets."""
    if balanced:
        return np.full(4, 0.25)
    p = np.array([0.0, GRADE_FRACTIONS[1], GRADE_FRACTIONS[2], GRADE_FRACTIONS[3]])
    p[0] = 1.0 - p.sum()
    return p


def sample_fracture_specs(meta: CaseMetadata, rng: np.random.Generator, balanced: bool = False):
    """Draw per-vertebra fracture specs following the grade distribution."""
    probs = grade_probabilities(balanced)
    specs = []
    for v in meta.vertebrae:
        grade = int(rng.choice(4, p=probs))
        if grade == 0:
            continue
        lo, hi = GRADE_LOSS_BANDS[grade]
        peak = float(rng.uniform(lo, hi))
        morphology = str(rng.choice(SAMPLED_MORPHOLOGIES))
        if morphology == "biconcave":
            peak = min(peak / _BICONCAVE_SEGMENT_MEAN, 0.79)
        specs.append(FractureSpec(v.label, morphology, peak))
    return specs


def generate_case(config: PhantomConfig, fracture_specs=None):
    """Phantom plus optional fractures; also returns the healthy labels.

    Returns ``(vol, labels, meta, healthy_labels)`` where ``healthy_labels``
    is the pre-compression label volume (the designed healthy reference).
    """
    vol, labels, meta = generate_phantom(config)
    healthy = LabelVolume(labels.data.copy(), labels.spacing)
    for spec in fracture_specs or []:
        vol, labels, meta = apply_compression(vol, labels, meta, spec)
    return vol, labels, meta, healthy


def write_case(case_dir, vol: Volume, labels: LabelVolume, meta: CaseMetadata, healthy: LabelVolume | None = None) -> None:
    """Store a case as ct.nii.gz / seg.nii.gz / meta.json (plus
    seg_healthy.nii.gz when the pre-fracture labels are supplied)."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    if vol.data.shape != labels.data.shape:
        raise NiftiError("CT and label shapes differ")
    write_nifti(case_dir / "ct.nii.gz", vol.data.astype(np.float32), vol.spacing)
    write_nifti(case_dir / "seg.nii.gz", labels.data.astype(np.int32), labels.spacing)
    if healthy is not None:
        write_nifti(case_dir / "seg_healthy.nii.gz", healthy.data.astype(np.int32), healthy.spacing)
    payload = {
        "spacing": list(meta.spacing),
        "seed": meta.seed,
        "soft_tissue_hu": meta.soft_tissue_hu,
        "noise_sigma_hu": meta.noise_sigma_hu,
        "case_id": meta.case_id,
        "vertebrae": [
            {
                "label": v.label,
                "healthy_height_mm": v.healthy_height_mm,
                "true_rhlv_triple": list(v.true_rhlv_triple),
                "genant_grade": v.genant_grade,
                "morphology": v.morphology,
                "arch_start_layer": v.arch_start_layer,
                "body_rows": list(v.body_rows),
            }
            for v in meta.vertebrae
        ],
    }
    (case_dir / "meta.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_case(case_dir):
    """Load a case directory; returns ``(vol, labels, meta)``.

    Raises :class:`NiftiError` when a volume is missing or the CT and
    segmentation disagree on shape/spacing.
    """
    case_dir = Path(case_dir)
    ct_path = case_dir / "ct.nii.gz"
    seg_path = case_dir / "seg.nii.gz"
    meta_path = case_dir / "meta.json"
    if not ct_path.exists():
        raise NiftiError(f"missing CT volume: {ct_path}")
    if not seg_path.exists():
        raise NiftiError(f"missing segmentation: {seg_path}")
    if not meta_path.exists():
        raise NiftiError(f"missing metadata: {meta_path}")
    ct, ct_spacing = read_nifti(ct_path)
    seg, seg_spacing = read_nifti(seg_path)
    if ct.shape != seg.shape:
        raise NiftiError(f"CT shape {ct.shape} != segmentation shape {seg.shape}")
    if not np.allclose(ct_spacing, seg_spacing, atol=1e-5):
        raise NiftiError(f"CT spacing {ct_spacing} != segmentation spacing {seg_spacing}")
    payload = json.loads(meta_path.read_text())
    meta = CaseMetadata(
        spacing=tuple(payload["spacing"]),
        seed=payload["seed"],
        soft_tissue_hu=payload["soft_tissue_hu"],
        noise_sigma_hu=payload["noise_sigma_hu"],
        case_id=payload.get("case_id", ""),
        vertebrae=[
            VertebraInfo(
                label=v["label"],
                healthy_height_mm=v["healthy_height_mm"],
                true_rhlv_triple=tuple(v["true_rhlv_triple"]),
                genant_grade=v["genant_grade"],
                morphology=v["morphology"],
                arch_start_layer=v["arch_start_layer"],
                body_rows=tuple(v["body_rows"]),
            )
            for v in payload["vertebrae"]
        ],
    )
    return Volume(ct, ct_spacing), LabelVolume(seg, seg_spacing), meta


def read_healthy_labels(case_dir) -> LabelVolume | None:
    path = Path(case_dir) / "seg_healthy.nii.gz"
    if not path.exists():
        return None
    data, spacing = read_nifti(path)
    return LabelVolume(data, spacing)
