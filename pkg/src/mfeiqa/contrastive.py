"""Distortion-aware branch: contrastive classes, two-scale views, NT-Xent losses and the encoder."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, load_image

log = logging.getLogger(__name__)


def build_contrastive_classes(manifest: DatasetManifest) -> list[Hashable]:
    """Synthetic images share a class per (type, level); every authentic image is its own class."""
    classes = []
    for i, r in enumerate(manifest.records):
        if r.domain == "authentic":
            classes.append(("authentic", r.path))
        else:
            if r.distortion_type is None or r.distortion_level is None:
                raise ValueError(f"synthetic record {i} ({r.path}) lacks distortion type/level")
            classes.append((r.distortion_type, r.distortion_level))
    return classes


def two_scale_views(image: torch.Tensor, crop_size: Optional[int] = None, seed: int = 0):
    """Return (full, half) views sharing one crop; half is a bilinear x0.5 resize of full.

    ``image`` is (C, H, W) or (N, C, H, W); with ``crop_size`` one random square crop is taken.
    """
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    h, w = x.shape[-2:]
    if crop_size is not None:
        if crop_size > min(h, w):
            raise ValueError(f"crop {crop_size} larger than image {h}x{w}")
        g = np.random.default_rng(seed)
        top = int(g.integers(0, h - crop_size + 1))
        left = int(g.integers(0, w - crop_size + 1))
        x = x[..., top : top + crop_size, left : left + crop_size]
        h = w = crop_size
    if h % 2 or w % 2:
        raise ValueError(f"view dims must be even, got {h}x{w}")
    half = F.interpolate(x, size=(h // 2, w // 2), mode="bilinear", align_corners=False)
    if squeeze:
        return x[0], half[0]
    return x, half


@dataclass
class ContrastiveBatch:
    """N embeddings with class ids, domain flags and the index of each item's other scale view."""

    embeddings: torch.Tensor  # (N, D)
    class_ids: torch.Tensor  # (N,) int
    authentic: torch.Tensor  # (N,) bool
    pair_index: Optional[torch.Tensor] = None  # (N,) int, -1 when absent
    scale: Optional[Sequence[str]] = None
    tau: float = 0.1

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if n < 2:
            raise ValueError("a contrastive batch needs at least two items")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.class_ids.shape != (n,) or self.authentic.shape != (n,):
            raise ValueError("class_ids/authentic must have one entry per embedding")


def _logits(batch: ContrastiveBatch) -> torch.Tensor:
    z = F.normalize(batch.embeddings, dim=-1)
    return z @ z.T / batch.tau


def _log_denominators(logits: torch.Tensor) -> torch.Tensor:
    n = logits.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=logits.device)
    return torch.logsumexp(logits.masked_fill(eye, float("-inf")), dim=1)


def ntxent_syn_loss(batch: ContrastiveBatch, i: int) -> torch.Tensor:
    """Mean over same-class partners j != i of -log softmax_{k != i}(z_i . z_k / tau)[j]."""
    logits = _logits(batch)
    pos = batch.class_ids == batch.class_ids[i]
    pos[i] = False
    if not pos.any():
        raise ValueError(f"item {i} has no positive in the batch")
    return (_log_denominators(logits)[i] - logits[i, pos]).mean()


def _pair_of(batch: ContrastiveBatch, i: int) -> int:
    if batch.pair_index is None or int(batch.pair_index[i]) < 0:
        raise ValueError(f"item {i} has no paired scale view")
    j = int(batch.pair_index[i])
    if j == i or j >= batch.embeddings.shape[0]:
        raise ValueError(f"invalid pair index {j} for item {i}")
    return j


def authentic_loss(batch: ContrastiveBatch, i: int) -> torch.Tensor:
    """Single-positive form: the positive is the other scale view of the same image."""
    j = _pair_of(batch, i)
    logits = _logits(batch)
    return _log_denominators(logits)[i] - logits[i, j]


def per_item_losses(batch: ContrastiveBatch) -> torch.Tensor:
    logits = _logits(batch)
    log_den = _log_denominators(logits)
    n = logits.shape[0]
    same = batch.class_ids[:, None] == batch.class_ids[None, :]
    same &= ~torch.eye(n, dtype=torch.bool, device=logits.device)
    counts = same.sum(1)
    syn_items = ~batch.authentic
    if bool((counts[syn_items] == 0).any()):
        bad = int(torch.nonzero(syn_items & (counts == 0))[0])
        raise ValueError(f"item {bad} has no positive in the batch")
    syn = log_den - (logits * same).sum(1) / counts.clamp(min=1)
    if bool(batch.authentic.any()):
        if batch.pair_index is None:
            raise ValueError("authentic items need paired scale views")
        idx = batch.pair_index.clamp(min=0)
        if bool((batch.pair_index[batch.authentic] < 0).any()):
            raise ValueError("authentic item without a paired scale view")
        aut = log_den - logits.gather(1, idx[:, None]).squeeze(1)
        return torch.where(batch.authentic, aut, syn)
    return syn


def total_pretrain_loss(batch: ContrastiveBatch) -> torch.Tensor:
    """Batch mean; synthetic items use the class-positive loss, authentic items the paired one."""
    return per_item_losses(batch).mean()


# --- encoder -----------------------------------------------------------------


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class DistortionEncoder(nn.Module):
    """Small four-block residual CNN with a projection head used only for pretraining.

    ``forward`` returns the unit-norm pooled feature (dimension ``embed_dim``) consumed downstream;
    ``project`` returns the unit-norm projection fed to the contrastive loss.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.widths = widths
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU())
        strides = (1, 2, 2, 2)
        blocks, cin = [], widths[0]
        for w, s in zip(widths, strides):
            blocks.append(_ResBlock(cin, w, s))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        d = widths[-1]
        self.projector = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def pooled(self, x):
        return self.blocks(self.stem(x)).mean(dim=(-2, -1))

    def forward(self, x):
        return F.normalize(self.pooled(x), dim=-1)

    def project(self, x):
        return F.normalize(self.projector(self.pooled(x)), dim=-1)


def encoder_forward(encoder: DistortionEncoder, image: torch.Tensor) -> torch.Tensor:
    """Embed one (C, H, W) image or a batch; any even-ish size works thanks to global pooling."""
    squeeze = image.dim() == 3
    z = encoder(image.unsqueeze(0) if squeeze else image)
    return z[0] if squeeze else z


@dataclass
class PretrainConfig:
    steps: int = 150
    batch_images: int = 24
    lr: float = 1e-3
    weight_decay: float = 1e-5
    tau: float = 0.1
    crop_size: int = 0  # 0 keeps the original size
    widths: tuple = (16, 32, 64, 128)
    seed: int = 0


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def load_images(manifest: DatasetManifest) -> list[torch.Tensor]:
    return [_to_tensor(load_image(manifest.resolve(r))) for r in manifest.records]


def pretrain_encoder(manifest: DatasetManifest, cfg: PretrainConfig = PretrainConfig(), images=None):
    """Contrastive pretraining on a manifest; returns (encoder, per-step losses)."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    classes = build_contrastive_classes(manifest)
    class_index = {c: k for k, c in enumerate(dict.fromkeys(classes))}
    class_ids = torch.tensor([class_index[c] for c in classes])
    authentic = torch.tensor([r.domain == "authentic" for r in manifest.records])
    images = images if images is not None else load_images(manifest)
    encoder = DistortionEncoder(cfg.widths)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_img = len(images)
    b = min(cfg.batch_images, n_img)
    crop = cfg.crop_size or None
    losses = []
    encoder.train()
    for step in range(cfg.steps):
        idx = rng.choice(n_img, size=b, replace=False)
        seeds = rng.integers(0, 2**31 - 1, size=b)
        views = [two_scale_views(images[i], crop, int(s)) for i, s in zip(idx, seeds)]
        full = torch.stack([v[0] for v in views])
        half = torch.stack([v[1] for v in views])
        z = torch.cat([encoder.project(full), encoder.project(half)])
        pair = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)])
        batch = ContrastiveBatch(
            embeddings=z,
            class_ids=class_ids[idx].repeat(2),
            authentic=authentic[idx].repeat(2),
            pair_index=pair,
            scale=["full"] * b + ["half"] * b,
            tau=cfg.tau,
        )
        loss = total_pretrain_loss(batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"pretraining loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 25 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    encoder.eval()
    return encoder, losses


@torch.no_grad()
def embed_images(encoder: DistortionEncoder, images: Sequence[torch.Tensor]) -> torch.Tensor:
    encoder.eval()
    return torch.stack([encoder_forward(encoder, img) for img in images])
