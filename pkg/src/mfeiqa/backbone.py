"""Quality estimation network: large-kernel-attention backbone, HF fusion, distortion fusion, MLP head."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .fusion import AFF, FFM
from .octave import HFEN, HFENConfig, zero_biases


@dataclass
class BackboneConfig:
    channels: tuple = (32, 64, 160, 256)
    depths: tuple = (1, 1, 1, 1)
    mlp_ratio: int = 4
    dw_kernel: int = 5
    dilated_kernel: int = 7
    dilation: int = 3
    layer_scale: float = 1e-2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.channels) != 4 or len(self.depths) != 4:
            raise ValueError("backbone needs exactly four stages")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hfen: HFENConfig = field(default_factory=HFENConfig)
    fusion: str = "aff"
    reduction: int = 4
    use_hfen: bool = True
    use_dan: bool = True
    embed_dim: int = 128
    head_hidden: int = 64


class LKA(nn.Module):
    """Decomposed large-kernel attention: x * pw(dilated_dw(dw(x)))."""

    def __init__(self, channels, dw_kernel=5, dilated_kernel=7, dilation=3):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, dw_kernel, padding=dw_kernel // 2, groups=channels)
        self.dw_dilated = nn.Conv2d(
            channels,
            channels,
            dilated_kernel,
            padding=dilation * (dilated_kernel // 2),
            dilation=dilation,
            groups=channels,
        )
        self.pw = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return x * self.pw(self.dw_dilated(self.dw(x)))


class SpatialAttention(nn.Module):
    def __init__(self, channels, cfg: BackboneConfig):
        super().__init__()
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.lka = LKA(channels, cfg.dw_kernel, cfg.dilated_kernel, cfg.dilation)
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return self.proj_out(self.lka(F.gelu(self.proj_in(x)))) + x


class VANBlock(nn.Module):
    def __init__(self, channels, cfg: BackboneConfig):
        super().__init__()
        hidden = channels * cfg.mlp_ratio
        self.norm1 = nn.BatchNorm2d(channels)
        self.attn = SpatialAttention(channels, cfg)
        self.norm2 = nn.BatchNorm2d(channels)
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.GELU(), nn.Conv2d(hidden, channels, 1))
        self.scale1 = nn.Parameter(torch.full((channels, 1, 1), cfg.layer_scale))
        self.scale2 = nn.Parameter(torch.full((channels, 1, 1), cfg.layer_scale))

    def forward(self, x):
        x = x + self.scale1 * self.attn(self.norm1(x))
        return x + self.scale2 * self.mlp(self.norm2(x))


class Stage(nn.Module):
    """Strided patch embedding (x4 for the first stage, x2 after) followed by VAN blocks."""

    def __init__(self, in_ch, out_ch, depth, first: bool, cfg: BackboneConfig):
        super().__init__()
        k, s = (7, 4) if first else (3, 2)
        self.stride = s
        self.embed = nn.Conv2d(in_ch, out_ch, k, stride=s, padding=k // 2)
        self.embed_norm = nn.BatchNorm2d(out_ch)
        self.blocks = nn.Sequential(*(VANBlock(out_ch, cfg) for _ in range(depth)))
        self.in_ch = in_ch

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"stage expects (N, {self.in_ch}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"stage input {h}x{w} not divisible by stride {self.stride}")
        return self.blocks(self.embed_norm(self.embed(x)))


class MLPHead(nn.Module):
    def __init__(self, channels, hidden=64):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x.mean(dim=(-2, -1))))).squeeze(-1)


class DistortionFusion(nn.Module):
    """Project the distortion embedding to C channels, broadcast over space, then AFF."""

    def __init__(self, embed_dim, channels, reduction=4):
        super().__init__()
        self.embed_dim = embed_dim
        self.proj = nn.Linear(embed_dim, channels)
        self.aff = AFF(channels, reduction)
        zero_biases(self)

    def forward(self, fq: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[-1] != self.embed_dim or z.shape[0] != fq.shape[0]:
            raise ValueError(f"embedding shape {tuple(z.shape)} incompatible with D={self.embed_dim}")
        zb = self.proj(z)[:, :, None, None].expand_as(fq)
        return self.aff(zb, fq)


class QualityNet(nn.Module):
    """Full quality model. ``forward(x, z)`` maps patches (N, 3, P, P) and embeddings (N, D) to scores (N,)."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        bc = cfg.backbone
        for c in bc.channels:
            if c % cfg.reduction:
                raise ValueError(f"stage channels {c} not divisible by reduction {cfg.reduction}")
        ins = (3,) + bc.channels[:3]
        self.stages = nn.ModuleList(
            Stage(ins[i], bc.channels[i], bc.depths[i], i == 0, bc) for i in range(4)
        )
        self.hfen = HFEN(bc.channels[0], cfg.hfen) if cfg.use_hfen else None
        self.ffms = (
            nn.ModuleList(
                FFM(cfg.hfen.out_channels, bc.channels[i + 1], cfg.reduction, cfg.fusion)
                for i in range(3)
            )
            if cfg.use_hfen
            else None
        )
        self.dist_fusion = (
            DistortionFusion(cfg.embed_dim, bc.channels[3], cfg.reduction) if cfg.use_dan else None
        )
        self.head = MLPHead(bc.channels[3], cfg.head_hidden)
        zero_biases(self)
        self.fusion_events = 0

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """F4 after the three HF fusions: F_{i+1} = FFM(g_i, f_{i+1}(F_i))."""
        self.fusion_events = 0
        f = self.stages[0](x)
        gs = self.hfen(f) if self.hfen is not None else None
        for i in range(3):
            f = self.stages[i + 1](f)
            if gs is not None:
                f = self.ffms[i](gs[i], f)
                self.fusion_events += 1
        return f

    def forward(self, x: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        f = self.features(x)
        if self.dist_fusion is not None:
            if z is None:
                raise ValueError("model uses the distortion branch but no embedding was given")
            f = self.dist_fusion(f, z)
        return self.head(f)


def stage_forward(model: QualityNet, i: int, x: torch.Tensor) -> torch.Tensor:
    """Run backbone stage ``i`` (1-based)."""
    return model.stages[i - 1](x)
