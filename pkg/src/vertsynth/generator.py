"""Coarse-to-fine inpainting generator.

The coarse stage is a U-shaped encoder/decoder over (masked CT, mask,
position-ratio) channels with healthy-attention maps concatenated into the
half- and full-resolution decoder levels; it emits the coarse image, the
adjacent-intact-vertebrae probability map, and a bounded height estimate
pooled from the bottleneck. The fine stage runs two encoders over (masked
CT, mask, ratio, adjacent-seg), one of them with contextual attention at
the bottleneck, concatenates them, and decodes with the coarse image
injected into the last two upsampling levels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GeneratorConfig:
    image_size: int = 256
    base_width: int = 32
    levels: int = 4
    h_max_mm: float = 40.0
    attn_ksize: int = 3
    detach_adjacent_seg: bool = True  # block adversarial pressure on the seg input


@dataclass
class CoarseInput:
    masked_ct: torch.Tensor   # (B, 1, H, W) in [0, 1]
    mask: torch.Tensor        # (B, 1, H, W) binary
    ratio_plane: torch.Tensor  # (B, 1, H, W) constant per sample
    attn_half: torch.Tensor   # (B, 1, H/2, W/2) healthy-attention map
    attn_full: torch.Tensor   # (B, 1, H, W)

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.masked_ct, self.mask, self.ratio_plane], dim=1)


@dataclass
class CoarseOutput:
    coarse_ct: torch.Tensor
    ahvs_seg: torch.Tensor
    h_pred: torch.Tensor  # (B,) mm


@dataclass
class FineOutput:
    refined_ct: torch.Tensor
    target_seg: torch.Tensor
    h_pred: torch.Tensor  # (B,) mm


def _conv_block(cin, cout, stride=1, dilation=1):
    pad = dilation
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, pad, dilation=dilation),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


class _Encoder(nn.Module):
    def __init__(self, in_channels, base_width, levels):
        super().__init__()
        self.stem = _conv_block(in_channels, base_width)
        downs = []
        width = base_width
        for _ in range(levels):
            nxt = min(width * 2, base_width * 8)
            downs.append(nn.Sequential(_conv_block(width, nxt, stride=2), _conv_block(nxt, nxt)))
            width = nxt
        self.downs = nn.ModuleList(downs)
        self.out_width = width

    def forward(self, x):
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats  # full -> coarsest


class _HeightHead(nn.Module):
    """Pooled bottleneck branch emitting a height in (0, h_max]."""

    def __init__(self, width, h_max):
        super().__init__()
        self.h_max = h_max
        self.fc = nn.Sequential(
            nn.Linear(width, width // 2), nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(width // 2, 1),
        )

    def forward(self, bottleneck):
        pooled = bottleneck.mean(dim=(2, 3))
        return self.h_max * torch.sigmoid(self.fc(pooled)).squeeze(1)


class _Decoder(nn.Module):
    """Nearest-upsample decoder with skip connections and optional extra
    channels injected at chosen output scales (attention maps or the coarse
    image)."""

    def __init__(self, enc_widths, extra_at_scale):
        super().__init__()
        # enc_widths: widths of encoder features, full -> coarsest
        self.extra_at_scale = dict(extra_at_scale)  # level index (0=full) -> n channels
        ups = []
        width = enc_widths[-1]
        for lvl in range(len(enc_widths) - 2, -1, -1):
            skip = enc_widths[lvl]
            extra = self.extra_at_scale.get(lvl, 0)
            ups.append(_conv_block(width + skip + extra, skip))
            width = skip
        self.ups = nn.ModuleList(ups)
        self.out_width = width

    def forward(self, feats, extras=None):
        extras = extras or {}
        x = feats[-1]
        for i, up in enumerate(self.ups):
            lvl = len(feats) - 2 - i
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            parts = [x, feats[lvl]]
            if lvl in self.extra_at_scale:
                parts.append(extras[lvl])
            x = up(torch.cat(parts, dim=1))
        return x


class CoarseGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        w, L = config.base_width, config.levels
        self.encoder = _Encoder(3, w, L)
        bw = self.encoder.out_width
        self.bottleneck = nn.Sequential(
            _conv_block(bw, bw, dilation=2), _conv_block(bw, bw, dilation=4)
        )
        self.height_head = _HeightHead(bw, config.h_max_mm)
        enc_widths = [w] + [min(w * 2 ** (i + 1), w * 8) for i in range(L)]
        # attention maps join the decoder at full (level 0) and half (level 1)
        self.decoder = _Decoder(enc_widths, {0: 1, 1: 1})
        self.image_head = nn.Conv2d(self.decoder.out_width, 1, 3, padding=1)
        self.seg_head = nn.Conv2d(self.decoder.out_width, 1, 3, padding=1)

    def forward(self, inputs: CoarseInput) -> CoarseOutput:
        feats = self.encoder(inputs.stacked())
        feats[-1] = self.bottleneck(feats[-1])
        h_pred = self.height_head(feats[-1])
        dec = self.decoder(feats, {0: inputs.attn_full, 1: inputs.attn_half})
        coarse = torch.sigmoid(self.image_head(dec))
        ahvs = torch.sigmoid(self.seg_head(dec))
        return CoarseOutput(coarse, ahvs, h_pred)


def contextual_attention(fg, bg, mask_ds, ksize: int = 3, softmax_scale: float = 10.0,
                         return_weights: bool = False):
    """Reconstruct masked feature locations from unmasked patches.

    Background patches (``ksize`` x ``ksize``, stride 1) are scored against
    each location by normalised cosine similarity, softmaxed with the given
    temperature scale, and overlap-added back; unmasked locations pass
    through unchanged. ``mask_ds`` is 1 on masked (foreground) locations.
    """
    if fg.shape != bg.shape:
        raise ValueError("foreground/background feature shapes differ")
    B, C, H, W = fg.shape
    if ksize > min(H, W):
        ksize = 1  # grid too small for the requested patch size
    pad = ksize // 2
    mask = (mask_ds > 0.5).to(fg.dtype)
    if mask.shape[-2:] != (H, W):
        raise ValueError("mask grid does not match the feature grid")

    outs, weight_maps = [], []
    for b in range(B):
        result = None
        for k in dict.fromkeys((ksize, 1)):  # retry with 1x1 patches if none fit
            result = _attend_one(fg[b : b + 1], bg[b : b + 1], mask[b : b + 1], k, softmax_scale)
            if result is not None:
                break
        if result is None:
            warnings.warn("mask covers every background patch; attention is a no-op")
            outs.append(fg[b : b + 1])
            if return_weights:
                weight_maps.append(torch.zeros(1, H * W, H, W, dtype=fg.dtype))
            continue
        outs.append(result[0])
        if return_weights:
            weight_maps.append(result[1])

    out = torch.cat(outs, dim=0)
    if return_weights:
        return out, torch.cat(weight_maps, dim=0)
    return out


def _attend_one(fg_b, bg_b, mask_b, ksize, softmax_scale):
    """Attention for a single item; None when no background patch is free of
    the mask at this patch size."""
    _, C, H, W = fg_b.shape
    pad = ksize // 2
    # only fully interior patches are candidates (no padding content)
    patches = F.unfold(bg_b, ksize)  # (1, C*k*k, L)
    L = patches.shape[-1]
    patches = patches[0].T.reshape(L, C, ksize, ksize)

    patch_masked = F.unfold(mask_b, ksize)[0].T.max(dim=1).values
    valid = patch_masked < 0.5  # patch touches no masked pixel
    if not valid.any():
        return None

    ones_kernel = torch.ones(1, 1, ksize, ksize, dtype=fg_b.dtype, device=fg_b.device)
    norm = patches.flatten(1).norm(dim=1).clamp_min(1e-8)
    kernels = patches / norm[:, None, None, None]
    inner = F.conv2d(F.pad(fg_b, (pad,) * 4), kernels)  # (1, L, H, W)
    sq = F.conv2d(F.pad((fg_b * fg_b).sum(dim=1, keepdim=True), (pad,) * 4), ones_kernel)
    scores = inner / sq.clamp_min(1e-16).sqrt()
    scores = scores + torch.where(
        valid, torch.zeros(L, dtype=fg_b.dtype), torch.full((L,), -1e9, dtype=fg_b.dtype)
    )[None, :, None, None]
    weights = torch.softmax(softmax_scale * scores, dim=1)

    recon = F.conv_transpose2d(weights, patches, padding=pad)
    counts = F.conv_transpose2d(
        torch.ones(1, 1, H, W, dtype=fg_b.dtype, device=fg_b.device), ones_kernel, padding=pad
    )
    recon = recon / counts
    return fg_b * (1 - mask_b) + recon * mask_b, weights


class ContextualAttentionLayer(nn.Module):
    def __init__(self, ksize=3, softmax_scale=10.0):
        super().__init__()
        self.ksize = ksize
        self.softmax_scale = softmax_scale

    def forward(self, features, mask_ds):
        return contextual_attention(features, features, mask_ds, self.ksize, self.softmax_scale)


class FineGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        w, L = config.base_width, config.levels
        self.encoder_plain = _Encoder(4, w, L)
        self.encoder_attn = _Encoder(4, w, L)
        self.attention = ContextualAttentionLayer(config.attn_ksize)
        bw = self.encoder_plain.out_width
        self.merge = _conv_block(2 * bw, bw)
        self.height_head = _HeightHead(bw, config.h_max_mm)
        enc_widths = [w] + [min(w * 2 ** (i + 1), w * 8) for i in range(L)]
        # the coarse image joins the final two upsampling levels
        self.decoder = _Decoder(enc_widths, {0: 1, 1: 1})
        self.image_head = nn.Conv2d(self.decoder.out_width, 1, 3, padding=1)
        self.seg_head = nn.Conv2d(self.decoder.out_width, 1, 3, padding=1)

    def forward(self, masked_ct, mask, ratio_plane, adjacent_seg, coarse_ct) -> FineOutput:
        if self.config.detach_adjacent_seg:
            adjacent_seg = adjacent_seg.detach()
        x = torch.cat([masked_ct, mask, ratio_plane, adjacent_seg], dim=1)
        feats = self.encoder_plain(x)
        feats_b = self.encoder_attn(x)
        scale = 2 ** self.config.levels
        mask_ds = F.interpolate(mask, scale_factor=1.0 / scale, mode="nearest")
        attended = self.attention(feats_b[-1], mask_ds)
        merged = self.merge(torch.cat([feats[-1], attended], dim=1))
        h_pred = self.height_head(merged)
        feats = feats[:-1] + [merged]
        coarse_half = F.interpolate(coarse_ct, scale_factor=0.5, mode="bilinear",
                                    align_corners=False)
        dec = self.decoder(feats, {0: coarse_ct, 1: coarse_half})
        refined = torch.sigmoid(self.image_head(dec))
        target_seg = torch.sigmoid(self.seg_head(dec))
        return FineOutput(refined, target_seg, h_pred)


@dataclass
class GeneratorPair:
    coarse: CoarseGenerator
    fine: FineGenerator
    config: GeneratorConfig

    @classmethod
    def build(cls, config: GeneratorConfig = GeneratorConfig()):
        return cls(CoarseGenerator(config), FineGenerator(config), config)

    def eval(self):
        self.coarse.eval()
        self.fine.eval()
        return self

    def train(self):
        self.coarse.train()
        self.fine.train()
        return self

    def parameters(self):
        yield from self.coarse.parameters()
        yield from self.fine.parameters()

    def forward_full(self, inputs: CoarseInput):
        coarse_out = self.coarse(inputs)
        fine_out = self.fine(
            inputs.masked_ct, inputs.mask, inputs.ratio_plane,
            coarse_out.ahvs_seg, coarse_out.coarse_ct,
        )
        return coarse_out, fine_out
