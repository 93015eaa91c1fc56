"""Healthy-region attention: a compact fracture/no-fracture classifier,
Grad-CAM++ extraction over its last convolutional block, and the inverted
normalised maps that emphasise intact vertebrae.

The classifier consumes masked canvases (the target vertebra hidden), so
what it learns to spot are fractured vertebrae among the visible
neighbours; inverting its class-activation map suppresses exactly those.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_MAP_SIZES = (128, 256)


class AttentionError(ValueError):
    pass


class FractureClassifier(nn.Module):
    """Four conv blocks with pooling, global average pooling, linear head
    with two logits (negative, positive=fracture visible)."""

    def __init__(self, base_width: int = 16):
        super().__init__()
        widths = [base_width, base_width * 2, base_width * 4, base_width * 4]
        blocks, cin = [], 1
        for i, w in enumerate(widths):
            blocks += [
                nn.Conv2d(cin, w, 3, padding=1),
                # BatchNorm keeps eval-mode activations local (running stats),
                # which Grad-CAM localisation depends on
                nn.BatchNorm2d(w),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            if i < 3:  # keep the last block unpooled: a size/8 map localises better
                blocks.append(nn.MaxPool2d(2))
            cin = w
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(widths[-1], 2)
        self.base_width = base_width

    def forward(self, x):
        feats = self.features(x)
        pooled = feats.mean(dim=(2, 3))
        return self.head(pooled)

    def forward_with_features(self, x):
        feats = self.features(x)
        logits = self.head(feats.mean(dim=(2, 3)))
        return logits, feats


@dataclass
class ClassifierBundle:
    model: FractureClassifier
    holdout_accuracy: float
    epochs: int
    seed: int


def train_fracture_classifier(images, labels, epochs: int = 8, lr: float = 1e-3,
                              batch_size: int = 16, seed: int = 0,
                              holdout_fraction: float = 0.2,
                              base_width: int = 16) -> ClassifierBundle:
    """Train the binary classifier on canvases; returns the fitted model with
    its held-out accuracy. Deterministic under a fixed seed."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 3 or len(images) != len(labels):
        raise AttentionError("expected (N, H, W) images with matching labels")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise AttentionError("single-class dataset; need fractured and healthy slices")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_hold = max(2, int(round(holdout_fraction * len(images))))
    hold, train = order[:n_hold], order[n_hold:]
    if len(np.unique(labels[train])) < 2:
        raise AttentionError("training split lost a class; provide more data")

    torch.manual_seed(seed)
    model = FractureClassifier(base_width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    x_train = torch.from_numpy(images[train])[:, None]
    y_train = torch.from_numpy(labels[train])

    model.train()
    for _ in range(epochs):
        perm = torch.from_numpy(rng.permutation(len(x_train)))
        for start in range(0, len(x_train), batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad()
            logits = model(x_train[idx])
            loss = F.cross_entropy(logits, y_train[idx])
            loss.backward()
            opt.step()

    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(images[hold])[:, None])
        acc = float((logits.argmax(dim=1).numpy() == labels[hold]).mean())
    return ClassifierBundle(model, acc, epochs, seed)


def gradcam_pp(model: FractureClassifier, image, target_class: int = 1) -> np.ndarray:
    """Grad-CAM++ map for the positive class over the last conv block.

    Pixel weights combine first/second/third powers of the score gradient;
    the map is ReLU-ed, nonnegative, and lives on the feature grid.
    """
    model.eval()
    x = torch.as_tensor(np.ascontiguousarray(image, dtype=np.float32))
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[None]
    logits, feats_probe = model.forward_with_features(x)
    # re-run with gradient tracking on the feature map only
    with torch.enable_grad():
        feats = model.features(x).detach().requires_grad_(True)
        score = model.head(feats.mean(dim=(2, 3)))[0, target_class]
        grads = torch.autograd.grad(score, feats)[0][0]  # (K, h, w)
    acts = feats.detach()[0]

    g2 = grads * grads
    g3 = g2 * grads
    denom = 2.0 * g2 + acts.sum(dim=(1, 2), keepdim=True) * g3
    alpha = torch.where(denom.abs() > 1e-12, g2 / denom, torch.zeros_like(g2))
    weights = (alpha * F.relu(grads)).sum(dim=(1, 2))  # (K,)
    cam = F.relu((weights[:, None, None] * acts).sum(dim=0))
    return cam.numpy()


@dataclass
class AttentionMaps:
    raw_cam: np.ndarray
    healthy: dict  # size -> (size, size) map in [0, 1]

    @property
    def healthy_128(self):
        return self.healthy[128]

    @property
    def healthy_256(self):
        return self.healthy[256]


def healthy_attention(raw_cam: np.ndarray, sizes=DEFAULT_MAP_SIZES) -> AttentionMaps:
    """Normalise the raw map to [0, 1], invert it, and resize bilinearly.

    A constant raw map carries no localisation evidence and maps to
    all-ones (nothing suppressed).
    """
    raw = np.asarray(raw_cam, dtype=np.float32)
    if not np.isfinite(raw).all():
        raise AttentionError("raw class-activation map contains non-finite values")
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        inverted = np.ones_like(raw)
    else:
        inverted = 1.0 - (raw - lo) / (hi - lo)
    t = torch.from_numpy(np.ascontiguousarray(inverted))[None, None]
    healthy = {}
    for size in sizes:
        resized = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
        healthy[size] = resized[0, 0].numpy().clip(0.0, 1.0)
    return AttentionMaps(raw, healthy)


def attention_maps_for(model: FractureClassifier, images, sizes=DEFAULT_MAP_SIZES):
    """Healthy-attention maps for a stack of canvases; returns one
    :class:`AttentionMaps` per image."""
    return [healthy_attention(gradcam_pp(model, img), sizes) for img in images]


def save_classifier(path, bundle: ClassifierBundle) -> None:
    tmp = Path(str(path) + ".tmp")
    torch.save(
        {
            "state_dict": bundle.model.state_dict(),
            "base_width": bundle.model.base_width,
            "holdout_accuracy": bundle.holdout_accuracy,
            "epochs": bundle.epochs,
            "seed": bundle.seed,
        },
        tmp,
    )
    tmp.replace(path)


def load_classifier(path) -> ClassifierBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing classifier checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = FractureClassifier(payload["base_width"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return ClassifierBundle(model, payload["holdout_accuracy"], payload["epochs"], payload["seed"])
