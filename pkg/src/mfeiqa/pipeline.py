"""Patch sampling, training, patch-averaged inference, checkpoints and the split protocol."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from . import __version__
from .backbone import BackboneConfig, ModelConfig, QualityNet
from .contrastive import DistortionEncoder, embed_images
from .data import DatasetManifest, load_image
from .metrics import plcc, srcc
from .octave import HFENConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mfeiqa-checkpoint"
CHECKPOINT_VERSION = "1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 2e-5
    lr_decay_factor: float = 10.0
    lr_decay_mode: str = "every"  # "every" epoch, or "once" after the first
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 5
    patch_size: int = 224
    patches_per_image: int = 50
    test_patches: int = 50
    seed: int = 0
    loss: str = "mae"
    target: str = "normalized"  # or "raw"
    # ablation switches
    addition_fusion: bool = False
    vanilla_conv: bool = False
    no_hfen: bool = False
    no_dan: bool = False
    # architecture
    channels: tuple = (32, 64, 160, 256)
    depths: tuple = (1, 1, 1, 1)
    mlp_ratio: int = 4
    dw_kernel: int = 5
    dilated_kernel: int = 7
    dilation: int = 3
    layer_scale: float = 1e-2
    hf_channels: int = 16
    hf_alpha: float = 0.5
    hf_kernel: int = 3
    reduction: int = 4
    head_hidden: int = 64

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depths = tuple(int(d) for d in self.depths)
        for name in ("initial_lr", "lr_decay_factor", "batch_size", "epochs", "patch_size",
                     "patches_per_image", "test_patches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.patch_size % 32:
            raise ValueError("patch_size must be divisible by 32")
        if self.lr_decay_mode not in ("every", "once"):
            raise ValueError(f"unknown lr_decay_mode {self.lr_decay_mode!r}")
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.target not in ("normalized", "raw"):
            raise ValueError(f"unknown target {self.target!r}")

    def model_config(self, embed_dim: int = 128) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(
                channels=self.channels,
                depths=self.depths,
                mlp_ratio=self.mlp_ratio,
                dw_kernel=self.dw_kernel,
                dilated_kernel=self.dilated_kernel,
                dilation=self.dilation,
                layer_scale=self.layer_scale,
            ),
            hfen=HFENConfig(
                channels=self.hf_channels,
                alpha=self.hf_alpha,
                kernel_size=self.hf_kernel,
                conv="vanilla" if self.vanilla_conv else "octave",
            ),
            fusion="add" if self.addition_fusion else "aff",
            reduction=self.reduction,
            use_hfen=not self.no_hfen,
            use_dan=not self.no_dan,
            embed_dim=embed_dim,
            head_hidden=self.head_hidden,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    n_repeats: int = 10
    seeds: Optional[tuple] = None  # defaults to 0..n_repeats-1

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        if self.seeds is not None:
            self.seeds = tuple(int(s) for s in self.seeds)
            if len(self.seeds) != self.n_repeats:
                raise ValueError("need one seed per repeat")

    def repeat_seeds(self) -> tuple:
        return self.seeds if self.seeds is not None else tuple(range(self.n_repeats))


# --- images and patches ------------------------------------------------------


@lru_cache(maxsize=4096)
def _cached_image(path: str) -> torch.Tensor:
    img = load_image(path)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def image_tensor(manifest: DatasetManifest, record) -> torch.Tensor:
    """(3, H, W) float32 tensor in [0, 1]."""
    return _cached_image(str(manifest.resolve(record)))


def _patch_geometry(rng: np.random.Generator, h: int, w: int, n: int, size: int, flip: bool):
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    tops = rng.integers(0, h - size + 1, size=n)
    lefts = rng.integers(0, w - size + 1, size=n)
    if flip:
        flips = rng.random((n, 2)) < 0.5
    else:
        flips = np.zeros((n, 2), dtype=bool)
    return tops, lefts, flips


def _crop(image: torch.Tensor, top, left, size, fh, fv) -> torch.Tensor:
    p = image[..., top : top + size, left : left + size]
    dims = [d for d, f in ((-1, fh), (-2, fv)) if f]
    return p.flip(dims) if dims else p


def sample_patches(image: torch.Tensor, n: int, size: int, seed: int, flip: bool = True) -> torch.Tensor:
    """``n`` random square crops of a (C, H, W) image, each flipped horizontally/vertically w.p. 0.5."""
    rng = np.random.default_rng(seed)
    tops, lefts, flips = _patch_geometry(rng, image.shape[-2], image.shape[-1], n, size, flip)
    return torch.stack(
        [_crop(image, int(t), int(l), size, bool(f[0]), bool(f[1])) for t, l, f in zip(tops, lefts, flips)]
    )


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.lr_decay_mode == "once":
        return cfg.initial_lr if epoch == 0 else cfg.initial_lr / cfg.lr_decay_factor
    return cfg.initial_lr / cfg.lr_decay_factor**epoch


# --- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """A trained quality model plus the frozen encoder it was trained with."""

    model: QualityNet
    cfg: TrainConfig
    encoder: Optional[DistortionEncoder] = None
    meta: dict = field(default_factory=dict)

    def embed(self, images) -> Optional[torch.Tensor]:
        if self.encoder is None or not self.model.cfg.use_dan:
            return None
        dtype = next(self.model.parameters()).dtype
        return embed_images(self.encoder, [im.to(next(self.encoder.parameters()).dtype) for im in images]).to(dtype)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {f"model.{k}": v.contiguous() for k, v in self.model.state_dict().items()}
        if self.encoder is not None:
            tensors.update({f"encoder.{k}": v.contiguous() for k, v in self.encoder.state_dict().items()})
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "config": json.dumps(asdict(self.cfg), sort_keys=True),
            "embed_dim": str(self.model.cfg.embed_dim),
            "encoder_widths": json.dumps(list(self.encoder.widths)) if self.encoder is not None else "",
            "meta": json.dumps(self.meta, sort_keys=True),
        }
        save_file(tensors, str(path), metadata=header)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, header = _read_container(path, CHECKPOINT_FORMAT)
        cfg = TrainConfig.from_dict(json.loads(header["config"]))
        # cast before loading so stored 64-bit weights are not rounded through 32 bits
        dtype = next(v.dtype for k, v in tensors.items() if k.startswith("model.") and v.is_floating_point())
        model = QualityNet(cfg.model_config(int(header["embed_dim"]))).to(dtype)
        _load_state(model, tensors, "model.")
        model.eval()
        encoder = None
        if header.get("encoder_widths"):
            enc_dtype = next(v.dtype for k, v in tensors.items() if k.startswith("encoder.") and v.is_floating_point())
            encoder = DistortionEncoder(json.loads(header["encoder_widths"])).to(enc_dtype)
            _load_state(encoder, tensors, "encoder.")
            encoder.eval()
        return cls(model, cfg, encoder, json.loads(header.get("meta", "{}")))


def _read_container(path, fmt):
    from safetensors import safe_open

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as f:
        header = f.metadata() or {}
    if header.get("format") != fmt:
        raise ValueError(f"{path} is not a {fmt} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported {fmt} version {header.get('version')}")
    return load_file(str(path)), header


def _load_state(module: torch.nn.Module, tensors: dict, prefix: str):
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)


ENCODER_FORMAT = "mfeiqa-encoder"


def save_encoder(encoder: DistortionEncoder, path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": ENCODER_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": json.dumps(list(encoder.widths)),
        "meta": json.dumps(meta or {}, sort_keys=True),
    }
    save_file({k: v.contiguous() for k, v in encoder.state_dict().items()}, str(path), metadata=header)
    return path


def load_encoder(path) -> DistortionEncoder:
    tensors, header = _read_container(path, ENCODER_FORMAT)
    dtype = next(v.dtype for v in tensors.values() if v.is_floating_point())
    enc = DistortionEncoder(json.loads(header["widths"])).to(dtype)
    enc.load_state_dict(tensors)
    return enc.eval()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- training ------------------------------------------------------------------


def _targets(manifest: DatasetManifest, cfg: TrainConfig) -> torch.Tensor:
    if cfg.target == "raw":
        return torch.tensor([r.raw_score for r in manifest.records])
    return torch.tensor([r.normalized for r in manifest.records])


def _quality_loss(pred, target, kind):
    if kind == "mse":
        return torch.mean((pred - target) ** 2)
    return torch.mean(torch.abs(pred - target))


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    encoder: Optional[DistortionEncoder] = None,
    val_manifest: Optional[DatasetManifest] = None,
    dtype: torch.dtype = torch.float32,
) -> Checkpoint:
    """Adam on patch-level regression; every patch inherits its image's score."""
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    if not cfg.no_dan and encoder is None:
        raise ValueError("the distortion branch is enabled but no pretrained encoder was given")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    embed_dim = encoder.embed_dim if encoder is not None else 128
    model = QualityNet(cfg.model_config(embed_dim)).to(dtype)
    ckpt = Checkpoint(model, cfg, None if cfg.no_dan else encoder)

    images = [image_tensor(manifest, r).to(dtype) for r in manifest.records]
    z_all = ckpt.embed(images)
    targets = _targets(manifest, cfg).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, weight_decay=cfg.weight_decay)

    history = {"epoch_loss": [], "step_loss": [], "val_srcc": [], "lr": []}
    size = cfg.patch_size
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        # (image index, top, left, flip_h, flip_v) for every patch of the epoch
        jobs = []
        for i, img in enumerate(images):
            tops, lefts, flips = _patch_geometry(rng, img.shape[-2], img.shape[-1], cfg.patches_per_image, size, True)
            jobs.extend((i, int(t), int(l), bool(f[0]), bool(f[1])) for t, l, f in zip(tops, lefts, flips))
        order = rng.permutation(len(jobs))
        model.train()
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [jobs[k] for k in order[start : start + cfg.batch_size]]
            if len(chunk) < 2:  # BatchNorm needs more than one sample
                continue
            x = torch.stack([_crop(images[i], t, l, size, fh, fv) for i, t, l, fh, fv in chunk])
            idx = torch.tensor([c[0] for c in chunk])
            z = z_all[idx] if z_all is not None else None
            loss = _quality_loss(model(x, z), targets[idx], cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, step {start // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        history["step_loss"].extend(epoch_losses)
        history["epoch_loss"].append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        history["lr"].append(lr)
        if val_manifest is not None:
            model.eval()
            preds = predict_manifest(ckpt, val_manifest, min(cfg.test_patches, 8), seed=cfg.seed)
            try:
                history["val_srcc"].append(srcc(preds, val_manifest.scores()))
            except ValueError:
                history["val_srcc"].append(math.nan)
        log.info(
            "epoch %d lr %.2e loss %.4f%s", epoch, lr, history["epoch_loss"][-1],
            f" val_srcc {history['val_srcc'][-1]:.3f}" if history["val_srcc"] else "",
        )
    model.eval()
    ckpt.meta = {"history": history, "n_train": len(manifest), "manifest": manifest.name}
    return ckpt


# --- inference -------------------------------------------------------------------


@torch.no_grad()
def predict_image(ckpt: Checkpoint, image: torch.Tensor, n_patches: int, seed: int, z=None) -> float:
    """Mean score over ``n_patches`` random (unflipped) crops."""
    model = ckpt.model
    model.eval()
    dtype = next(model.parameters()).dtype
    image = image.to(dtype)
    patches = sample_patches(image, n_patches, ckpt.cfg.patch_size, seed, flip=False)
    if z is None and model.cfg.use_dan:
        z = ckpt.embed([image])[0]
    zb = z.expand(n_patches, -1) if z is not None else None
    return float(model(patches, zb).mean())


@torch.no_grad()
def predict_manifest(ckpt: Checkpoint, manifest: DatasetManifest, n_patches: int, seed: int = 0) -> np.ndarray:
    dtype = next(ckpt.model.parameters()).dtype
    images = [image_tensor(manifest, r).to(dtype) for r in manifest.records]
    z_all = ckpt.embed(images)
    return np.array(
        [
            predict_image(ckpt, img, n_patches, seed + k, None if z_all is None else z_all[k])
            for k, img in enumerate(images)
        ]
    )


def evaluate_split(ckpt: Checkpoint, test: DatasetManifest, n_patches: Optional[int] = None, seed: int = 0):
    """(srcc, plcc, predictions) over every test image."""
    if len(test) == 0:
        raise ValueError("empty test set")
    preds = predict_manifest(ckpt, test, n_patches or ckpt.cfg.test_patches, seed)
    obj = test.scores()
    return srcc(preds, obj), plcc(preds, obj), preds


# --- split protocol --------------------------------------------------------------


def make_splits(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()):
    """Reproducible (train, test) manifests; every record of one group lands on one side."""
    groups = sorted({r.group for r in manifest.records})
    if len(groups) < 2:
        raise ValueError("need at least two reference groups to split")
    n_train = min(max(int(round(spec.train_fraction * len(groups))), 1), len(groups) - 1)
    splits = []
    for k, s in enumerate(spec.repeat_seeds()):
        perm = np.random.default_rng(s).permutation(len(groups))
        train_groups = {groups[j] for j in perm[:n_train]}
        tr = [r for r in manifest.records if r.group in train_groups]
        te = [r for r in manifest.records if r.group not in train_groups]
        splits.append(
            (manifest.subset(tr, f"{manifest.name}-train{k}"), manifest.subset(te, f"{manifest.name}-test{k}"))
        )
    return splits


def aggregate(values) -> dict:
    """Median, mean and population std; exact sums make the result independent of split order."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    mean = math.fsum(v) / v.size
    std = math.sqrt(math.fsum((v - mean) ** 2) / v.size)
    return {"median": float(np.median(v)), "mean": mean, "std": std}


def run_protocol(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    encoder: Optional[DistortionEncoder] = None,
    spec: SplitSpec = SplitSpec(),
    log_val: bool = False,
) -> dict:
    """Train and test on every split; returns the per-split rows and the aggregates."""
    rows = []
    for k, (tr, te) in enumerate(make_splits(manifest, spec)):
        ckpt = train(cfg, tr, encoder, val_manifest=te if log_val else None)
        s, p, preds = evaluate_split(ckpt, te, seed=cfg.seed)
        rows.append(
            {
                "split": k,
                "srcc": s,
                "plcc": p,
                "n_train": len(tr),
                "n_test": len(te),
                "epoch_loss": ckpt.meta["history"]["epoch_loss"],
                "predictions": [float(x) for x in preds],
                "objective": [float(x) for x in te.scores()],
                "paths": [r.path for r in te.records],
            }
        )
        log.info("split %d: srcc %.4f plcc %.4f", k, s, p)
    return {
        "splits": rows,
        "aggregate": {
            "srcc": aggregate([r["srcc"] for r in rows]),
            "plcc": aggregate([r["plcc"] for r in rows]),
        },
    }
