"""Building blocks: conv units, spatial self-attention, and the four modules
(AGLRFE, ALPM, CFM, MRFFAM) plus the decoder stage that composes them."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigurationError


def resolve_groups(channels: int, groups: int) -> int:
    """Largest divisor of `channels` that does not exceed the requested group count."""
    for g in range(min(groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ConvBlockB(nn.Module):
    """Two stacked [3x3 dilated conv -> BatchNorm -> GELU] units.

    Padding equals the dilation rate, so spatial size is preserved.
    """

    def __init__(self, in_channels: int, out_channels: int, dilation: int = 1):
        super().__init__()
        if in_channels <= 0 or out_channels <= 0:
            raise ConfigurationError(
                f"conv block needs positive channel counts, got {in_channels}->{out_channels}"
            )
        if dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {dilation}")
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=dilation, dilation=dilation),
            nn.BatchNorm2d(out_channels),
            nn.GELU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=dilation, dilation=dilation),
            nn.BatchNorm2d(out_channels),
            nn.GELU(),
        )

    def forward(self, x):
        return self.block(x)


class ConvBlockG(nn.Module):
    """Two stacked [3x3 dilated conv -> GroupNorm -> GELU] units."""

    def __init__(self, in_channels: int, out_channels: int, dilation: int = 1, groups: int = 4):
        super().__init__()
        if in_channels <= 0 or out_channels <= 0:
            raise ConfigurationError(
                f"conv block needs positive channel counts, got {in_channels}->{out_channels}"
            )
        if dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {dilation}")
        g = resolve_groups(out_channels, groups)
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=dilation, dilation=dilation),
            nn.GroupNorm(g, out_channels),
            nn.GELU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=dilation, dilation=dilation),
            nn.GroupNorm(g, out_channels),
            nn.GELU(),
        )

    def forward(self, x):
        return self.block(x)


def conv_gn_gelu_stack(in_channels: int, out_channels: int, depth: int, groups: int) -> nn.Sequential:
    """Stack of `depth` [3x3 conv -> GroupNorm -> GELU] units."""
    layers = []
    c = in_channels
    for _ in range(depth):
        layers += [
            nn.Conv2d(c, out_channels, 3, padding=1),
            nn.GroupNorm(resolve_groups(out_channels, groups), out_channels),
            nn.GELU(),
        ]
        c = out_channels
    return nn.Sequential(*layers)


class SpatialSelfAttention(nn.Module):
    """Single-head scaled dot-product attention over flattened spatial positions.

    Keys, queries and values each come from an independent 3x3 convolution on
    the input; attention weights are row-normalized (each query's weights over
    all positions sum to 1) and the output is reshaped back to (B, d_k, H, W).
    """

    def __init__(self, in_channels: int, dk: int, site: str = "attention"):
        super().__init__()
        if dk <= 0:
            raise ConfigurationError(f"attention d_k must be positive, got {dk}")
        self.key = nn.Conv2d(in_channels, dk, 3, padding=1)
        self.query = nn.Conv2d(in_channels, dk, 3, padding=1)
        self.value = nn.Conv2d(in_channels, dk, 3, padding=1)
        self.dk = dk
        self.site = site

    def forward(self, feat):
        b, _, h, w = feat.shape
        k = self.key(feat).flatten(2)  # (B, dk, N)
        q = self.query(feat).flatten(2)
        v = self.value(feat).flatten(2)
        scores = torch.bmm(q.transpose(1, 2), k) / math.sqrt(self.dk)  # (B, N, N)
        if not torch.isfinite(scores).all():
            raise FloatingPointError(f"non-finite attention logits at site {self.site!r}")
        weights = torch.softmax(scores, dim=-1)
        out = torch.bmm(weights, v.transpose(1, 2))  # (B, N, dk)
        return out.transpose(1, 2).reshape(b, self.dk, h, w)


class AGLRFE(nn.Module):
    """Attention-guided long-range feature extraction.

    A bank of dilated convolutions captures long-range features while a pooled
    self-attention branch produces a single-channel sigmoid gate that rescales
    each dilated branch (f + f * gate). Gated branches and the entry features
    are concatenated, max-pooled by 2 and fused, so the output is at half the
    input resolution.
    """

    def __init__(self, in_channels, out_channels, dilations, pool_stride, attn_dk, groups,
                 site="AGLRFE"):
        super().__init__()
        if not dilations:
            raise ConfigurationError("AGLRFE needs at least one dilation rate")
        width = out_channels
        self.entry = ConvBlockB(in_channels, width)
        self.attn_pre = ConvBlockB(width, width)
        self.attention = SpatialSelfAttention(width, attn_dk, site=site)
        self.gate_reduce = ConvBlockB(attn_dk, 1)
        self.branches = nn.ModuleList(
            ConvBlockG(width, width, dilation=d, groups=groups) for d in dilations
        )
        self.fuse = ConvBlockB(width * (len(dilations) + 1), out_channels)
        self.pool_stride = pool_stride

    def gate(self, feat):
        """Sigmoid gate map in (0, 1) at the resolution of `feat`."""
        pooled = F.avg_pool2d(feat, self.pool_stride)
        attn = self.attention(self.attn_pre(pooled))
        attn = F.interpolate(attn, size=feat.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.gate_reduce(attn))

    def forward(self, x):
        feat = self.entry(x)
        gate = self.gate(feat)
        gated = [f + f * gate for f in (branch(feat) for branch in self.branches)]
        merged = torch.cat(gated + [feat], dim=1)
        return self.fuse(F.max_pool2d(merged, 2))


class ALPM(nn.Module):
    """Attention-enhanced local processing.

    Two stride-2 max-pools expose a small map where a self-attention residual
    is applied; the result is upsampled, merged with the once-pooled features
    and added to a parallel conv path. Output is at half the input resolution.
    """

    def __init__(self, in_channels, out_channels, attn_width, groups=4, site="ALPM"):
        super().__init__()
        self.reduce = ConvBlockB(in_channels, attn_width)
        self.attention = SpatialSelfAttention(attn_width, attn_width, site=site)
        self.merge = ConvBlockB(attn_width + in_channels, out_channels)
        self.local = ConvBlockB(in_channels, out_channels)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"ALPM input spatial size must be divisible by 4, got {h}x{w}")
        fx = F.max_pool2d(x, 2)
        feat = self.reduce(F.max_pool2d(fx, 2))
        feat = feat + self.attention(feat)
        up = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
        fy = self.merge(torch.cat([up, fx], dim=1))
        return self.local(fx) + fy


class CFM(nn.Module):
    """Cross-feature merge: concatenate the global and local branch outputs and
    refine them with a depth-3 stack of [conv -> GroupNorm -> GELU] units."""

    DEPTH = 3

    def __init__(self, global_channels, local_channels, out_channels, groups=4):
        super().__init__()
        self.stack = conv_gn_gelu_stack(
            global_channels + local_channels, out_channels, self.DEPTH, groups
        )

    def forward(self, global_feat, local_feat):
        if global_feat.shape[-2:] != local_feat.shape[-2:]:
            raise ValueError(
                "CFM branch resolutions differ: global "
                f"{tuple(global_feat.shape)} vs local {tuple(local_feat.shape)}"
            )
        return self.stack(torch.cat([global_feat, local_feat], dim=1))


class MRFFAM(nn.Module):
    """Multi-receptive-field aggregation.

    The input channels are split into equal chunks, one per dilation rate;
    each chunk goes through a dilated conv unit, and the chunk outputs are
    concatenated with the input and refined.
    """

    def __init__(self, channels, dilations, out_channels, groups=4):
        super().__init__()
        if not dilations:
            raise ConfigurationError("MRFFAM needs at least one dilation rate")
        if channels % len(dilations):
            raise ConfigurationError(
                f"{channels} channels not divisible into {len(dilations)} chunks"
            )
        chunk = channels // len(dilations)
        self.branches = nn.ModuleList(
            ConvBlockG(chunk, chunk, dilation=d, groups=groups) for d in dilations
        )
        self.refine = ConvBlockB(2 * channels, out_channels)

    def forward(self, x):
        chunks = x.chunk(len(self.branches), dim=1)
        outs = [branch(c) for branch, c in zip(self.branches, chunks)]
        return self.refine(torch.cat(outs + [x], dim=1))


class DecoderStage(nn.Module):
    """One decoding stage: parallel MRFFAM and identity paths on the input,
    bilinear x2 upsampling, concatenation with the encoder skip, and a depth-2
    conv refinement. `forward` also returns the MRFFAM branch output so it can
    be deep-supervised.
    """

    REFINE_DEPTH = 2

    def __init__(self, in_channels, skip_channels, out_channels, dilations, groups=4,
                 use_mrffam=True):
        super().__init__()
        if use_mrffam:
            self.branch = MRFFAM(in_channels, dilations, in_channels, groups=groups)
        else:
            self.branch = ConvBlockB(in_channels, in_channels)
        self.refine = conv_gn_gelu_stack(
            2 * in_channels + skip_channels, out_channels, self.REFINE_DEPTH, groups
        )

    def forward(self, x, skip):
        expected = (2 * x.shape[-2], 2 * x.shape[-1])
        if skip.shape[-2:] != expected:
            raise ValueError(
                f"decoder skip must be {expected}, got {tuple(skip.shape[-2:])} "
                f"for input {tuple(x.shape[-2:])}"
            )
        branch = self.branch(x)
        merged = torch.cat([branch, x], dim=1)
        up = F.interpolate(merged, scale_factor=2, mode="bilinear", align_corners=False)
        return self.refine(torch.cat([up, skip], dim=1)), branch


class DownProjection(nn.Module):
    """Plain conv projection with a stride-2 max-pool; ablation stand-in for an
    encoder branch, matching its output channels and stride."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.block = ConvBlockB(in_channels, out_channels)

    def forward(self, x):
        return F.max_pool2d(self.block(x), 2)


class ConcatProjection(nn.Module):
    """Concatenate two same-resolution maps and project; ablation stand-in for CFM."""

    def __init__(self, global_channels, local_channels, out_channels):
        super().__init__()
        self.block = ConvBlockB(global_channels + local_channels, out_channels)

    def forward(self, global_feat, local_feat):
        if global_feat.shape[-2:] != local_feat.shape[-2:]:
            raise ValueError(
                "branch resolutions differ: "
                f"{tuple(global_feat.shape)} vs {tuple(local_feat.shape)}"
            )
        return self.block(torch.cat([global_feat, local_feat], dim=1))
