"""Shared fixtures: miniature phantom cases, a trained fracture classifier,
and a small healthy-canvas dataset. Miniature geometry uses 2 mm row
spacing so the 40 mm slot occupies 20 rows of a 64-row canvas and the
neighbouring vertebrae stay visible."""

import numpy as np
import pytest
import torch

from vertsynth.attention import train_fracture_classifier
from vertsynth.phantom import FractureSpec, PhantomConfig, generate_case
from vertsynth.preprocess import preprocess_case
from vertsynth.training import build_canvas_dataset

MINI_PATCH = 64


def mini_config(seed, **kw):
    # base height varies per case (20-26 mm) but is near-constant within a
    # case, and the 12 mm gap clips everything beyond the adjacent vertebrae
    # out of the 64-row canvas: the healthy height of a masked vertebra is
    # then only readable from its direct neighbours, which is the mechanism
    # the iterative-synthesis comparison exercises
    base_height = 20.0 + (seed * 13) % 7
    defaults = dict(
        n_vertebrae=5,
        volume_shape=(104, 72, 72),
        spacing=(2.0, 1.0, 1.0),
        body_height_mm=base_height,
        gap_mm=12.0,
        height_gradient=0.0,
        height_jitter=0.02,
        noise_sigma_hu=8.0,
        seed=seed,
    )
    defaults.update(kw)
    return PhantomConfig(**defaults)


def make_mini_case(seed, fracture_specs=None):
    return generate_case(mini_config(seed), fracture_specs)


def canvas_frame_mask(canvas, seg_patch, label):
    """Transport (seg == label) rows from the source patch into the canvas
    frame (test-side oracle mirroring the canvas row bookkeeping)."""
    src = seg_patch == label
    out = np.zeros_like(src)
    n_up, n_lo = canvas.upper_rows, canvas.lower_rows
    out[canvas.slot_start - n_up : canvas.slot_start] = src[canvas.x_upper - n_up : canvas.x_upper]
    out[canvas.slot_end : canvas.slot_end + n_lo] = src[canvas.x_lower : canvas.x_lower + n_lo]
    return out


@pytest.fixture(scope="session")
def classifier_data():
    """Masked canvases labelled by whether a fractured vertebra is visible."""
    images, labels = [], []
    for seed in range(4):  # fractured cases: severe fracture on label 3
        vol, labs, meta, _ = make_mini_case(
            100 + seed, [FractureSpec(3, "uniform", 0.5)]
        )
        per_vertebra, _ = preprocess_case(vol, labs, meta, patch_size=MINI_PATCH)
        for target in (2, 4):  # the fracture is adjacent and visible
            vc = per_vertebra[target]
            for canvas in vc.canvases[::2]:
                images.append(canvas.image)
                labels.append(1)
    for seed in range(4):  # healthy cases
        vol, labs, meta, _ = make_mini_case(200 + seed)
        per_vertebra, _ = preprocess_case(vol, labs, meta, patch_size=MINI_PATCH)
        for target in (2, 4):
            vc = per_vertebra[target]
            for canvas in vc.canvases[::2]:
                images.append(canvas.image)
                labels.append(0)
    return np.stack(images), np.array(labels)


@pytest.fixture(scope="session")
def trained_classifier(classifier_data):
    images, labels = classifier_data
    return train_fracture_classifier(images, labels, epochs=10, seed=0)


@pytest.fixture(scope="session")
def localization_case():
    """A fractured case plus a canvas whose visible fracture region is known
    in canvas coordinates.

    The region is the fractured vertebra's pre-collapse extent: the residual
    body plus the rows it lost (compression anchors the inferior endplate,
    so the collapse void sits directly above the residual body)."""
    vol, labs, meta, _ = make_mini_case(321, [FractureSpec(3, "uniform", 0.5)])
    per_vertebra, context = preprocess_case(vol, labs, meta, patch_size=MINI_PATCH)
    vc = per_vertebra[2]
    mid = len(vc.canvases) // 2
    canvas = vc.canvases[mid]

    from vertsynth.preprocess import extract_sagittal_patch

    _, seg_patch, _ = extract_sagittal_patch(
        context["normalized"], context["body_labels"], 2, vc.slices[mid], MINI_PATCH
    )
    fracture_mask = canvas_frame_mask(canvas, seg_patch, 3)
    rows = np.nonzero(fracture_mask.any(axis=1))[0]
    cols = fracture_mask.any(axis=0)
    info = meta.vertebra(3)
    observed_mm = (rows.max() - rows.min() + 1) * canvas.spacing
    lost_rows = int(round((info.healthy_height_mm - observed_mm) / canvas.spacing))
    top = max(0, rows.min() - max(0, lost_rows))
    fracture_mask[top : rows.min(), cols] = True
    return canvas, fracture_mask


@pytest.fixture(scope="session")
def healthy_cases():
    out = []
    for seed in range(3):
        vol, labs, meta, _ = make_mini_case(300 + seed)
        out.append((vol, labs, meta))
    return out


@pytest.fixture(scope="session")
def mini_dataset(healthy_cases, trained_classifier):
    prepped = [
        preprocess_case(vol, labs, meta, patch_size=MINI_PATCH)[0:2]
        for vol, labs, meta in healthy_cases
    ]
    cases = [(pv, meta) for (pv, _), (_, _, meta) in zip(prepped, healthy_cases)]
    return build_canvas_dataset(cases, trained_classifier, MINI_PATCH, slice_stride=2)


@pytest.fixture(scope="session")
def full_dataset(trained_classifier):
    """Eight healthy cases (~500 slices) covering the 20-26 mm base-height
    range; used by the 50-epoch end-to-end acceptance run."""
    cases = []
    for seed in range(8):
        vol, labs, meta, _ = make_mini_case(300 + seed)
        pv, _ = preprocess_case(vol, labs, meta, patch_size=MINI_PATCH)
        cases.append((pv, meta))
    return build_canvas_dataset(cases, trained_classifier, MINI_PATCH, slice_stride=2)
