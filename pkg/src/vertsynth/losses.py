"""Training objectives: mask-normalised l1, the three patch-discriminator
adversarial terms, soft Dice, Sobel edge loss, relative height loss, and
the weighted total.

Discriminator objective values follow the log D(real) + log(1 - D(fake))
form (so a blind D scoring 0.5 everywhere yields 2 log 0.5); the generator
minimises the non-saturating -log D(fake) instead of the vanishing minimax
term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_LOG_EPS = 1e-12
DICE_EPS = 1.0


@dataclass
class LossWeights:
    l1_coarse: float = 0.5
    l1_fine: float = 0.5
    adv_global: float = 1.0 / 3.0
    adv_local: float = 1.0 / 3.0
    adv_seg: float = 1.0 / 3.0
    height_coarse: float = 0.5
    height_fine: float = 0.5
    total_adv: float = 1.0
    total_dice: float = 20.0
    total_l1: float = 40.0
    total_height: float = 80.0
    total_edge: float = 80.0

    def validate(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def _as_4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def l1_loss(real, coarse, fine, mask, w: LossWeights = LossWeights()):
    """Mask-restricted l1 between the real canvas and both generator
    outputs, normalised by the masked-pixel count."""
    real, coarse, fine, mask = (_as_4d(t) for t in (real, coarse, fine, mask))
    m = mask.to(real.dtype)
    denom = m.sum()
    if denom.item() == 0:
        raise ValueError("empty mask")
    term_c = (m * (real - coarse).abs()).sum() / denom
    term_f = (m * (real - fine).abs()).sum() / denom
    return w.l1_coarse * term_c + w.l1_fine * term_f


class PatchDiscriminator(nn.Module):
    """Fully convolutional real/fake classifier emitting a patch score grid
    in (0, 1)."""

    def __init__(self, in_channels: int = 1, base_width: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, base_width, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        width = base_width
        for i in range(1, n_layers):
            prev, width = width, min(base_width * 2**i, base_width * 8)
            layers += [
                nn.Conv2d(prev, width, 4, 2, 1),
                nn.InstanceNorm2d(width, affine=True),
                nn.LeakyReLU(0.2, True),
            ]
        layers.append(nn.Conv2d(width, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return torch.sigmoid(self.net(x))


@dataclass
class DiscriminatorSet:
    d_global: PatchDiscriminator
    d_local: PatchDiscriminator
    d_seg: PatchDiscriminator

    @classmethod
    def build(cls, base_width: int = 64):
        return cls(
            PatchDiscriminator(1, base_width),
            PatchDiscriminator(1, base_width),
            PatchDiscriminator(1, base_width),
        )

    def modules(self):
        return (self.d_global, self.d_local, self.d_seg)

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()


def _log(p):
    return torch.log(p.clamp_min(_LOG_EPS))


def _d_value(scores_real, scores_fake):
    return _log(scores_real).mean() + _log(1.0 - scores_fake).mean()


@dataclass
class AdversarialTerms:
    d_global: torch.Tensor
    d_local: torch.Tensor
    d_seg: torch.Tensor
    d_total: torch.Tensor
    g_global: torch.Tensor
    g_local: torch.Tensor
    g_seg: torch.Tensor
    g_total: torch.Tensor


def slot_crop(canvas, slot):
    start, end = slot
    return _as_4d(canvas)[:, :, start:end, :]


def adversarial_losses(discs: DiscriminatorSet, real_canvas, fake_canvas,
                       real_seg, fake_seg, slot, w: LossWeights = LossWeights()):
    """Patch-discriminator objective values (global canvas, slot crop,
    target segmentation) plus the generator's non-saturating terms."""
    real_canvas, fake_canvas = _as_4d(real_canvas), _as_4d(fake_canvas)
    real_seg, fake_seg = _as_4d(real_seg), _as_4d(fake_seg)

    pairs = [
        (discs.d_global, real_canvas, fake_canvas),
        (discs.d_local, slot_crop(real_canvas, slot), slot_crop(fake_canvas, slot)),
        (discs.d_seg, real_seg, fake_seg),
    ]
    d_vals, g_vals = [], []
    for d, real, fake in pairs:
        s_real, s_fake = d(real), d(fake)
        d_vals.append(_d_value(s_real, s_fake))
        g_vals.append(-_log(s_fake).mean())

    d_total = w.adv_global * d_vals[0] + w.adv_local * d_vals[1] + w.adv_seg * d_vals[2]
    g_total = w.adv_global * g_vals[0] + w.adv_local * g_vals[1] + w.adv_seg * g_vals[2]
    return AdversarialTerms(*d_vals, d_total, *g_vals, g_total)


def soft_dice_term(pred, target, eps: float = DICE_EPS):
    """Per-sample soft Dice loss 1 - (2*sum(pq)+eps)/(sum(p)+sum(q)+eps),
    averaged over the batch."""
    pred, target = _as_4d(pred), _as_4d(target).to(_as_4d(pred).dtype)
    inter = (pred * target).sum(dim=(1, 2, 3))
    sums = pred.sum(dim=(1, 2, 3)) + target.sum(dim=(1, 2, 3))
    return (1.0 - (2.0 * inter + eps) / (sums + eps)).mean()


def dice_loss(ahvs_pred, ahvs_target, target_pred, target_target):
    """Mean of the adjacent-vertebrae and target-vertebra Dice terms."""
    return 0.5 * (
        soft_dice_term(ahvs_pred, ahvs_target)
        + soft_dice_term(target_pred, target_target)
    )


_SOBEL_GX = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
)


def sobel_edges(seg_map):
    """Sobel gradient magnitude with replicate padding.

    Accepts a 2-D array/tensor or a (B, 1, H, W) batch; numpy in, numpy out.
    """
    was_numpy = isinstance(seg_map, np.ndarray)
    x = torch.as_tensor(np.ascontiguousarray(seg_map, dtype=np.float64)) if was_numpy else seg_map
    squeeze = x.dim() == 2
    x = _as_4d(x)
    kx = _SOBEL_GX.to(x.dtype)[None, None]
    ky = kx.transpose(-1, -2)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    # tiny stabiliser keeps the gradient finite on flat regions without
    # perturbing magnitudes beyond 1e-8
    mag = torch.sqrt(gx * gx + gy * gy + 1e-16)
    if squeeze:
        mag = mag[0, 0]
    return mag.numpy() if was_numpy else mag


def edge_loss(seg_real, seg_pred, squared: bool = False):
    """Mean absolute difference of the Sobel magnitude maps (``squared=True``
    switches to MSE)."""
    was_numpy = isinstance(seg_real, np.ndarray)
    if was_numpy:
        seg_real = torch.as_tensor(np.asarray(seg_real, dtype=np.float64))
        seg_pred = torch.as_tensor(np.asarray(seg_pred, dtype=np.float64))
    diff = sobel_edges(seg_real) - sobel_edges(seg_pred)
    loss = (diff**2).mean() if squared else diff.abs().mean()
    return float(loss) if was_numpy else loss


def height_loss(h_real, h_pred_coarse, h_pred_fine, w: LossWeights = LossWeights()):
    """Relative height error of both stage predictions."""
    h_real = torch.as_tensor(h_real, dtype=torch.float64 if not torch.is_tensor(h_real) else None)
    h_pred_coarse = torch.as_tensor(h_pred_coarse)
    h_pred_fine = torch.as_tensor(h_pred_fine)
    if (h_real <= 0).any():
        raise ValueError("real height must be positive")
    term_c = ((h_real - h_pred_coarse).abs() / h_real).mean()
    term_f = ((h_real - h_pred_fine).abs() / h_real).mean()
    return w.height_coarse * term_c + w.height_fine * term_f


def total_generator_loss(adv, dice, l1, edge, height, w: LossWeights = LossWeights()):
    """Weighted sum of the five generator objectives."""
    return (
        w.total_adv * adv
        + w.total_dice * dice
        + w.total_l1 * l1
        + w.total_edge * edge
        + w.total_height * height
    )
