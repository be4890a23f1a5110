"""Octave convolution and the high-frequency extraction network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


def downsample_avg2(x: torch.Tensor) -> torch.Tensor:
    """2x2 average pooling over the last two dims; accepts (C, H, W) or (N, C, H, W)."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    if x.dim() == 3:
        return F.avg_pool2d(x.unsqueeze(0), 2).squeeze(0)
    return F.avg_pool2d(x, 2)


def upsample_nearest2(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour x2 upsampling: every cell becomes a 2x2 block."""
    return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def zero_biases(module: nn.Module) -> nn.Module:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and m.bias is not None:
            nn.init.zeros_(m.bias)
    return module


class OctaveConv(nn.Module):
    """Four-path octave convolution over a (high, low) pair, stride 1, same padding.

    high' = conv_hh(high) + up(conv_lh(low))
    low'  = conv_ll(low) + conv_hl(down(high))
    """

    def __init__(self, high_in, low_in, high_out, low_out, kernel_size=3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        pad = kernel_size // 2
        self.conv_hh = nn.Conv2d(high_in, high_out, kernel_size, padding=pad)
        self.conv_lh = nn.Conv2d(low_in, high_out, kernel_size, padding=pad)
        self.conv_ll = nn.Conv2d(low_in, low_out, kernel_size, padding=pad)
        self.conv_hl = nn.Conv2d(high_in, low_out, kernel_size, padding=pad)
        zero_biases(self)

    def forward(self, high: torch.Tensor, low: torch.Tensor):
        if high.shape[1] != self.conv_hh.in_channels or low.shape[1] != self.conv_ll.in_channels:
            raise ValueError(
                f"channel mismatch: pair has {high.shape[1]}/{low.shape[1]}, weights expect "
                f"{self.conv_hh.in_channels}/{self.conv_ll.in_channels}"
            )
        hh, hw = high.shape[-2:]
        if low.shape[-2:] != (hh // 2, hw // 2) or hh % 2 or hw % 2:
            raise ValueError(f"low branch {tuple(low.shape[-2:])} is not half of high {(hh, hw)}")
        out_h = self.conv_hh(high) + upsample_nearest2(self.conv_lh(low))
        out_l = self.conv_ll(low) + self.conv_hl(downsample_avg2(high))
        return out_h, out_l


def octave_forward(high, low, conv: OctaveConv):
    return conv(high, low)


class OctaveBlock(nn.Module):
    """One high-frequency module: optional x2 entry pooling, octave conv, BN+ReLU per branch."""

    def __init__(self, high_ch, low_ch, kernel_size=3, downsample=False):
        super().__init__()
        self.downsample = downsample
        self.conv = OctaveConv(high_ch, low_ch, high_ch, low_ch, kernel_size)
        self.bn_h = nn.BatchNorm2d(high_ch)
        self.bn_l = nn.BatchNorm2d(low_ch)

    def forward(self, high, low):
        if self.downsample:
            high, low = downsample_avg2(high), downsample_avg2(low)
        high, low = self.conv(high, low)
        return F.relu(self.bn_h(high)), F.relu(self.bn_l(low))


class VanillaBlock(nn.Module):
    """Single-path replacement for OctaveBlock with the same kernel parameter count."""

    def __init__(self, channels, kernel_size=3, downsample=False):
        super().__init__()
        self.downsample = downsample
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.bn = nn.BatchNorm2d(channels)
        zero_biases(self)

    def forward(self, x):
        if self.downsample:
            x = downsample_avg2(x)
        return F.relu(self.bn(self.conv(x)))


@dataclass
class HFENConfig:
    channels: int = 16
    alpha: float = 0.5
    kernel_size: int = 3
    conv: str = "octave"  # or "vanilla"

    @property
    def low_channels(self) -> int:
        return int(round(self.alpha * self.channels))

    @property
    def high_channels(self) -> int:
        return self.channels - self.low_channels

    @property
    def out_channels(self) -> int:
        """Channel count of each g_i."""
        return self.high_channels if self.conv == "octave" else self.channels


class HFEN(nn.Module):
    """Vanilla stem, channel split into an octave pair, then three chained octave blocks.

    Returns the high branch after each block (g1, g2, g3); g_{i+1} is half the size of g_i.
    The final low branch is dropped.
    """

    def __init__(self, in_channels: int, cfg: HFENConfig = HFENConfig()):
        super().__init__()
        if cfg.conv not in ("octave", "vanilla"):
            raise ValueError(f"unknown hf conv {cfg.conv!r}")
        self.cfg = cfg
        k = cfg.kernel_size
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, cfg.channels, k, padding=k // 2),
            nn.BatchNorm2d(cfg.channels),
            nn.ReLU(),
        )
        if cfg.conv == "octave":
            if not 0 < cfg.low_channels < cfg.channels:
                raise ValueError("alpha must leave channels on both branches")
            self.split_high = nn.Conv2d(cfg.channels, cfg.high_channels, 1)
            self.split_low = nn.Conv2d(cfg.channels, cfg.low_channels, 1)
            self.blocks = nn.ModuleList(
                OctaveBlock(cfg.high_channels, cfg.low_channels, k, downsample=i > 0)
                for i in range(3)
            )
        else:
            self.blocks = nn.ModuleList(
                VanillaBlock(cfg.channels, k, downsample=i > 0) for i in range(3)
            )
        zero_biases(self)

    def forward(self, f1: torch.Tensor):
        h, w = f1.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"HFEN input spatial dims must be divisible by 8, got {h}x{w}")
        x = self.stem(f1)
        outs = []
        if self.cfg.conv == "octave":
            high, low = self.split_high(x), downsample_avg2(self.split_low(x))
            for block in self.blocks:
                high, low = block(high, low)
                outs.append(high)
        else:
            for block in self.blocks:
                x = block(x)
                outs.append(x)
        return tuple(outs)
