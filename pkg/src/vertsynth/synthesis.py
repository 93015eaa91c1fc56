"""Inference: per-slice inpainting of a masked vertebra, crop of the
generated slot to the predicted height, write-back into the volume, and the
iterative modes (restore neighbours first, or every other vertebra).

All slices of a vertebra share one crop height (the median of the per-slice
predictions); per-slice heights would shear the stacked body. The crop is
written back centred on the original vertebra's rows, so when the predicted
height equals the real height the write-back lands exactly on the original
rows, and voxels outside the touched windows stay bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import ClassifierBundle, attention_maps_for
from .generator import CoarseInput
from .phantom import CaseMetadata, LabelVolume, Volume
from .preprocess import (
    MaskedCanvas,
    build_masked_canvas,
    centered_offset,
    extract_sagittal_patch,
    remove_pedicles,
    straighten_spine,
    window_intensity,
)
from .quantification import RHLVRecord, column_height_field, compute_rhlv


class SynthesisError(RuntimeError):
    pass


@dataclass
class GeneratedVertebra:
    target: int
    reassembled_ct: np.ndarray        # 3-D, windowed-intensity domain
    gen_seg: np.ndarray               # 3-D bool, the generated body
    h_pred_slices: np.ndarray         # per-slice mm
    h_pred_mm: float                  # body median, mm
    provenance: dict = field(default_factory=dict)


def synthesize_slice(canvas: MaskedCanvas, models, classifier: ClassifierBundle):
    """Inpaint one canvas; returns the slot crop of the refined image, the
    thresholded slot crop of the target segmentation, and the predicted
    height in mm."""
    outs = _forward_canvases([canvas], models, classifier)
    refined, seg, h_pred = outs
    s0, s1 = canvas.slot_start, canvas.slot_end
    return refined[0, s0:s1], seg[0, s0:s1] >= 0.5, float(h_pred[0])


def _forward_canvases(canvases, models, classifier: ClassifierBundle):
    """Batched coarse+fine forward over canvases; numpy outputs."""
    gen = models.generators.eval()
    size = canvases[0].image.shape[0]
    maps = attention_maps_for(classifier.model, [c.image for c in canvases],
                              sizes=(size // 2, size))
    to_t = lambda arrs: torch.from_numpy(np.stack(arrs).astype(np.float32))[:, None]
    ratio_plane = torch.from_numpy(
        np.stack([np.full_like(c.image, c.ratio, dtype=np.float32) for c in canvases])
    )[:, None]
    inputs = CoarseInput(
        to_t([c.image for c in canvases]),
        to_t([c.mask for c in canvases]),
        ratio_plane,
        to_t([m.healthy[size // 2] for m in maps]),
        to_t([m.healthy[size] for m in maps]),
    )
    with torch.no_grad():
        _, fine_out = gen.forward_full(inputs)
    return (
        fine_out.refined_ct[:, 0].numpy(),
        fine_out.target_seg[:, 0].numpy(),
        fine_out.h_pred.numpy(),
    )


def crop_slot_to_height(slot_content: np.ndarray, h_rows: int) -> np.ndarray:
    """Centered crop of the generated slot to the restored height."""
    slot_rows = slot_content.shape[0]
    if h_rows > slot_rows:
        raise SynthesisError(f"restored height {h_rows} rows exceeds the {slot_rows}-row slot")
    start = centered_offset(slot_rows, h_rows)
    return slot_content[start : start + h_rows]


def shrm_crop_insert(inpainted_slot: np.ndarray, h_pred_mm: float, ct_upper: np.ndarray,
                     ct_lower: np.ndarray, spacing_mm: float) -> np.ndarray:
    """Crop the slot to round(h_pred/spacing) rows and concatenate it between
    the preserved upper and lower content."""
    h_rows = int(round(h_pred_mm / spacing_mm))
    crop = crop_slot_to_height(inpainted_slot, h_rows)
    return np.concatenate([ct_upper, crop, ct_lower], axis=0)


class CaseSynthesizer:
    """Straightens and windows a case once, then synthesizes vertebrae in a
    shared frame so iterative modes compose volumes consistently."""

    def __init__(self, vol: Volume, labels: LabelVolume, meta: CaseMetadata, models,
                 classifier: ClassifierBundle, patch_size: int, h_max_mm: float = 40.0,
                 straighten: bool = True):
        if straighten:
            vol, labels = straighten_spine(vol, labels)
        removal = remove_pedicles(labels)
        self.nvol = window_intensity(vol)
        self.body = removal.labels
        self.meta = meta
        self.models = models
        self.classifier = classifier
        self.patch_size = patch_size
        self.h_max_mm = h_max_mm
        self.spacing = self.nvol.spacing

    # -- geometry helpers ------------------------------------------------------

    def _patch_origin(self, vert_id: int):
        from scipy import ndimage

        mask = self.body.data == vert_id
        if not mask.any():
            raise SynthesisError(f"label {vert_id} absent from case")
        cx, cy, _ = ndimage.center_of_mass(mask)
        return int(round(cx)) - self.patch_size // 2, int(round(cy)) - self.patch_size // 2

    def _slice_range(self, vert_id: int):
        mask = self.body.data == vert_id
        zs = np.nonzero(mask.any(axis=(0, 1)))[0]
        return int(zs.min()), int(zs.max())

    def labels_in_order(self):
        return sorted(v.label for v in self.meta.vertebrae)

    def neighbors_of(self, vert_id: int):
        order = self.labels_in_order()
        i = order.index(vert_id)
        return [order[j] for j in (i - 1, i + 1) if 0 <= j < len(order)]

    # -- synthesis --------------------------------------------------------------

    def _synthesize_into(self, data: np.ndarray, vert_id: int):
        """Inpaint one vertebra on ``data`` (windowed domain); returns the new
        volume, the 3-D generated segmentation, per-slice heights, and the
        replaced row window."""
        from .preprocess import NormalizedVolume

        z0, z1 = self._slice_range(vert_id)
        nvol = NormalizedVolume(data, self.spacing, self.nvol.window)
        canvases = []
        for z in range(z0, z1 + 1):
            patch, seg, ratio = extract_sagittal_patch(
                nvol, self.body, vert_id, z, self.patch_size
            )
            canvases.append(
                build_masked_canvas(patch, seg, vert_id, ratio, self.spacing[0], self.h_max_mm)
            )
        refined, seg_prob, h_pred = _forward_canvases(canvases, self.models, self.classifier)

        h_med = float(np.median(h_pred))
        sx = self.spacing[0]
        h_rows = int(round(h_med / sx))
        r0, c0 = self._patch_origin(vert_id)

        out = data.copy()
        gen_seg = np.zeros(data.shape, dtype=bool)
        union = None
        for i, (z, canvas) in enumerate(zip(range(z0, z1 + 1), canvases)):
            h_real_rows = canvas.x_lower - canvas.x_upper
            insert = canvas.slot_start + centered_offset(canvas.slot_rows, h_real_rows)
            offset_ins = insert - canvas.x_upper  # patch row -> canvas row
            crop_start = canvas.slot_start + centered_offset(canvas.slot_rows, h_rows)

            vol_crop_start = crop_start - offset_ins + r0
            vol_body_start = r0 + canvas.x_upper
            vol_body_end = r0 + canvas.x_lower
            u0 = min(vol_crop_start, vol_body_start)
            u1 = max(vol_crop_start + h_rows, vol_body_end)
            u0c, u1c = max(0, u0), min(data.shape[0], u1)
            union = (u0c, u1c) if union is None else (min(union[0], u0c), max(union[1], u1c))

            cols = np.arange(self.patch_size)
            vcols = cols + c0
            keep = (vcols >= 0) & (vcols < data.shape[1])
            canvas_rows = np.arange(u0c, u1c) - r0 + offset_ins
            out[np.ix_(np.arange(u0c, u1c), vcols[keep], [z])] = \
                refined[i][np.ix_(canvas_rows, cols[keep])][:, :, None]

            seg_crop = seg_prob[i][crop_start : crop_start + h_rows] >= 0.5
            s0 = max(0, vol_crop_start)
            s1 = min(data.shape[0], vol_crop_start + h_rows)
            crop_rows = np.arange(s0, s1) - vol_crop_start
            gen_seg[np.ix_(np.arange(s0, s1), vcols[keep], [z])] = \
                seg_crop[np.ix_(crop_rows, cols[keep])][:, :, None]

        return out, gen_seg, h_pred, union

    def synthesize(self, vert_id: int, mode: str = "one_step") -> GeneratedVertebra:
        if vert_id not in {v.label for v in self.meta.vertebrae}:
            raise SynthesisError(f"no vertebra labelled {vert_id} in the case")
        if mode not in ("one_step", "two_step", "continuous"):
            raise SynthesisError(f"unknown synthesis mode {mode!r}")

        data = self.nvol.data
        replaced = {}
        neighbors = []
        if mode == "two_step":
            neighbors = self.neighbors_of(vert_id)
            for nb in neighbors:
                data, _, _, window = self._synthesize_into(data, nb)
                replaced[nb] = window
        elif mode == "continuous":
            neighbors = [l for l in self.labels_in_order() if l != vert_id]
            for nb in neighbors:
                data, _, _, window = self._synthesize_into(data, nb)
                replaced[nb] = window

        out, gen_seg, h_pred, window = self._synthesize_into(data, vert_id)
        replaced[vert_id] = window
        return GeneratedVertebra(
            target=vert_id,
            reassembled_ct=out,
            gen_seg=gen_seg,
            h_pred_slices=h_pred,
            h_pred_mm=float(np.median(h_pred)),
            provenance={
                "mode": mode,
                "neighbors": neighbors,
                "replaced_rows": replaced,
            },
        )

    def observed_body(self, vert_id: int) -> np.ndarray:
        return self.body.data == vert_id

    def quantify(self, generated: GeneratedVertebra, mode: str | None = None) -> RHLVRecord:
        """RHLV of the generated body against the observed one."""
        gen_field = column_height_field(generated.gen_seg, self.spacing)
        ori_field = column_height_field(self.observed_body(generated.target), self.spacing)
        return compute_rhlv(
            gen_field, ori_field, vertebra=generated.target,
            mode=mode or generated.provenance.get("mode", ""),
        )
