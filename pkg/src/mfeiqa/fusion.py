"""Attentional feature fusion (AFF) and the feature fusion module (FFM)."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .octave import zero_biases


class AFF(nn.Module):
    """Sigmoid-gated convex combination of two equally shaped feature maps.

    w = sigmoid(local(X + Y) + global(X + Y)), out = w * X + (1 - w) * Y, where each
    branch is pointwise conv -> BN -> pointwise conv and the global branch first
    average-pools to 1x1 (its C x 1 x 1 result broadcasts over space).
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        mid = channels // reduction
        self.channels = channels
        self.local_att = nn.Sequential(
            nn.Conv2d(channels, mid, 1), nn.BatchNorm2d(mid), nn.Conv2d(mid, channels, 1)
        )
        self.global_att = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, mid, 1),
            nn.BatchNorm2d(mid),
            nn.Conv2d(mid, channels, 1),
        )
        zero_biases(self)

    def weights(self, f_add: torch.Tensor) -> torch.Tensor:
        if f_add.dim() != 4 or f_add.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, H, W), got {tuple(f_add.shape)}")
        return torch.sigmoid(self.local_att(f_add) + self.global_att(f_add))

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
        w = self.weights(x + y)
        out = w * x + (1 - w) * y
        # the combination is convex; the clamp only removes last-bit rounding so that the
        # bound min(x, y) <= out <= max(x, y) (and out == x when x == y) holds exactly
        return torch.maximum(torch.minimum(out, torch.maximum(x, y)), torch.minimum(x, y))


def compute_fusion_weights(f_add: torch.Tensor, aff: AFF) -> torch.Tensor:
    return aff.weights(f_add)


def aff_fuse(x: torch.Tensor, y: torch.Tensor, aff: AFF) -> torch.Tensor:
    return aff(x, y)


class FFMPreprocess(nn.Module):
    """Max-pool to the quality-feature size, then 1x1 conv, BN and PReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.PReLU(out_channels)
        zero_biases(self)

    @staticmethod
    def pool(hf: torch.Tensor, target_hw) -> torch.Tensor:
        h, w = hf.shape[-2:]
        th, tw = target_hw
        if h % th or w % tw or h // th != w // tw:
            raise ValueError(f"cannot max-pool {h}x{w} to {th}x{tw} with an integer factor")
        k = h // th
        return hf if k == 1 else F.max_pool2d(hf, k, k)

    def forward(self, hf: torch.Tensor, target_hw) -> torch.Tensor:
        return self.act(self.bn(self.conv(self.pool(hf, target_hw))))


class FFM(nn.Module):
    """Inject high-frequency features into quality features.

    fusion="add" swaps the attentional fusion for plain addition; preprocessing stays.
    """

    def __init__(self, hf_channels: int, qf_channels: int, reduction: int = 4, fusion: str = "aff"):
        super().__init__()
        if fusion not in ("aff", "add"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.fusion = fusion
        self.pre = FFMPreprocess(hf_channels, qf_channels)
        self.aff = AFF(qf_channels, reduction) if fusion == "aff" else None

    def forward(self, hf: torch.Tensor, qf: torch.Tensor) -> torch.Tensor:
        x = self.pre(hf, qf.shape[-2:])
        if x.shape != qf.shape:
            raise ValueError(f"preprocessed hf {tuple(x.shape)} does not match qf {tuple(qf.shape)}")
        if self.aff is None:
            return x + qf
        return self.aff(x, qf)
