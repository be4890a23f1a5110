"""Dataset manifests, score normalization and the synthetic toy distortion corpus."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import fft as sfft
from scipy import ndimage

MANIFEST_COLUMNS = [
    "path",
    "raw_score",
    "score_type",
    "score_lo",
    "score_hi",
    "distortion_type",
    "distortion_level",
    "domain",
]
# optional trailing column; lets synthetic sets declare their reference image
REFERENCE_COLUMN = "reference"

SCORE_TYPES = ("MOS", "DMOS")
DOMAINS = ("synthetic", "authentic")
DISTORTION_KINDS = ("gaussian_blur", "white_noise", "jpeg_like", "contrast_change")
MAX_LEVEL = 5

# per-level strength ladders, index 0 is level 1
_BLUR_SIGMA = (1.0, 1.6, 2.3, 3.2, 4.5)
_NOISE_SIGMA = (0.04, 0.07, 0.10, 0.14, 0.20)
_JPEG_SCALE = (2.0, 4.0, 7.0, 12.0, 24.0)
_CONTRAST_FACTOR = (0.65, 0.50, 0.38, 0.28, 0.18)

# standard JPEG luminance table, rescaled to [0, 1] pixel range
_JPEG_TABLE = (
    np.array(
        [
            [16, 11, 10, 16, 24, 40, 51, 61],
            [12, 12, 14, 19, 26, 58, 60, 55],
            [14, 13, 16, 24, 40, 57, 69, 56],
            [14, 17, 22, 29, 51, 87, 80, 62],
            [18, 22, 37, 56, 68, 109, 103, 77],
            [24, 35, 55, 64, 81, 104, 113, 92],
            [49, 64, 78, 87, 103, 121, 120, 101],
            [72, 92, 95, 98, 112, 100, 103, 99],
        ],
        dtype=np.float64,
    )
    / 255.0
)


class ManifestError(ValueError):
    """Raised for unreadable or invalid manifests."""


@dataclass(frozen=True)
class ImageRecord:
    path: str
    raw_score: float
    score_type: str
    score_range: tuple[float, float]
    distortion_type: Optional[str] = None
    distortion_level: Optional[int] = None
    domain: str = "synthetic"
    reference: Optional[str] = None

    def __post_init__(self):
        lo, hi = self.score_range
        if self.score_type not in SCORE_TYPES:
            raise ValueError(f"unknown score type {self.score_type!r}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if not np.isfinite(self.raw_score):
            raise ValueError("raw_score is not finite")
        if not lo <= self.raw_score <= hi:
            raise ValueError(f"score {self.raw_score} outside declared range [{lo}, {hi}]")
        if self.domain == "authentic" and (
            self.distortion_type is not None or self.distortion_level is not None
        ):
            raise ValueError("authentic records cannot carry a distortion type/level")
        if self.distortion_level is not None and self.distortion_level < 1:
            raise ValueError("distortion_level must be >= 1")

    @property
    def normalized(self) -> float:
        return normalize_score(self.raw_score, self.score_type, self.score_range)

    @property
    def group(self) -> str:
        """Split group: the reference image when known, else the image itself."""
        return self.reference if self.reference is not None else self.path


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: tuple[ImageRecord, ...]
    reference_paths: Optional[tuple[str, ...]] = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if not self.records:
            raise ManifestError("empty manifest")
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ManifestError("duplicate image paths in manifest")

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, records: Sequence[ImageRecord], name: Optional[str] = None) -> "DatasetManifest":
        refs = None
        if self.reference_paths is not None:
            used = {r.reference for r in records}
            refs = tuple(p for p in self.reference_paths if p in used)
        return DatasetManifest(name or self.name, tuple(records), refs, self.root)

    def scores(self) -> np.ndarray:
        return np.array([r.normalized for r in self.records])


def normalize_score(raw: float, score_type: str, score_range: tuple[float, float]) -> float:
    """Linear min-max map to [0, 1], flipped for DMOS so that higher is always better."""
    lo, hi = score_range
    if not hi > lo:
        raise ValueError(f"zero-width score range [{lo}, {hi}]")
    if not lo <= raw <= hi:
        raise ValueError(f"score {raw} outside range [{lo}, {hi}]")
    v = (raw - lo) / (hi - lo)
    if score_type == "DMOS":
        return 1.0 - v
    if score_type == "MOS":
        return v
    raise ValueError(f"unknown score type {score_type!r}")


def _opt(s: str) -> Optional[str]:
    s = s.strip()
    return s or None


def _parse_row(row: dict) -> ImageRecord:
    level = _opt(row["distortion_level"])
    return ImageRecord(
        path=row["path"].strip(),
        raw_score=float(row["raw_score"]),
        score_type=row["score_type"].strip(),
        score_range=(float(row["score_lo"]), float(row["score_hi"])),
        distortion_type=_opt(row["distortion_type"]),
        distortion_level=int(level) if level is not None else None,
        domain=row["domain"].strip(),
        reference=_opt(row.get(REFERENCE_COLUMN) or ""),
    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"manifest header missing columns: {missing}")
        records = []
        for i, row in enumerate(reader):
            try:
                records.append(_parse_row(row))
            except (ValueError, TypeError, AttributeError) as e:
                raise ManifestError(f"row {i}: {e}") from e
    if not records:
        raise ManifestError("empty manifest")
    refs = sorted({r.reference for r in records if r.reference is not None})
    return DatasetManifest(path.stem, tuple(records), tuple(refs) or None, path.parent)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def manifest_to_csv(manifest: DatasetManifest) -> str:
    with_ref = any(r.reference is not None for r in manifest.records)
    header = MANIFEST_COLUMNS + ([REFERENCE_COLUMN] if with_ref else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in manifest.records:
        row = [
            r.path,
            _fmt(float(r.raw_score)),
            r.score_type,
            _fmt(float(r.score_range[0])),
            _fmt(float(r.score_range[1])),
            _fmt(r.distortion_type),
            _fmt(r.distortion_level),
            r.domain,
        ]
        if with_ref:
            row.append(_fmt(r.reference))
        w.writerow(row)
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_to_csv(manifest), encoding="utf-8")
    return path


def load_image(path) -> np.ndarray:
    """8-bit RGB file -> float64 array (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# --- synthetic distortions -------------------------------------------------


def _blocks_dct_quantize(channel: np.ndarray, step: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(channel, ((0, ph), (0, pw)), mode="edge")
    H, W = x.shape
    blocks = x.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = sfft.dctn(blocks - 0.5, axes=(2, 3), norm="ortho")
    coef = np.round(coef / step) * step
    out = sfft.idctn(coef, axes=(2, 3), norm="ortho") + 0.5
    return out.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]


def synth_distort(image: np.ndarray, kind: str, level: int, seed: int = 0) -> np.ndarray:
    """Apply one toy distortion at severity ``level`` (1..5) to an (H, W, 3) image in [0, 1]."""
    if kind not in DISTORTION_KINDS:
        raise ValueError(f"unknown distortion kind {kind!r}")
    if not (isinstance(level, (int, np.integer)) and 1 <= level <= MAX_LEVEL):
        raise ValueError(f"level must be an integer in 1..{MAX_LEVEL}, got {level!r}")
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    k = level - 1
    if kind == "gaussian_blur":
        # wrap mode keeps the normalized kernel exactly mass-preserving
        s = _BLUR_SIGMA[k]
        out = ndimage.gaussian_filter(img, sigma=(s, s, 0), mode="wrap", truncate=4.0)
    elif kind == "white_noise":
        rng = np.random.default_rng(seed)
        out = img + rng.normal(0.0, _NOISE_SIGMA[k], size=img.shape)
    elif kind == "jpeg_like":
        step = _JPEG_TABLE * _JPEG_SCALE[k]
        out = np.stack([_blocks_dct_quantize(img[..., c], step) for c in range(img.shape[-1])], -1)
    else:
        mean = img.mean(axis=(0, 1), keepdims=True)
        out = mean + (img - mean) * _CONTRAST_FACTOR[k]
    return np.clip(out, 0.0, 1.0)


def synth_reference(size: int, seed: int) -> np.ndarray:
    """Procedural pristine image: smooth colour field, shapes and oriented texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, d = rng.uniform(-0.4, 0.4, size=3)
        img[..., c] = 0.5 + a * xx + b * yy + d * xx * yy
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        colour = rng.uniform(0, 1, size=3)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r**2
        else:
            mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * rng.uniform(0.4, 1.0))
        img[mask] = 0.4 * img[mask] + 0.6 * colour
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(6, 14)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    img += 0.12 * stripes[..., None]
    img += 0.04 * rng.standard_normal((size // 4, size // 4, 1)).repeat(4, 0).repeat(4, 1)
    # fixed global contrast so that contrast_change severity is identifiable without a reference
    img = 0.5 + (img - img.mean()) * (0.18 / img.std())
    return np.clip(img, 0.0, 1.0)


def build_toy_corpus(
    n_refs: int,
    kinds: Sequence[str] = DISTORTION_KINDS,
    levels: Sequence[int] = (1, 3, 5),
    seed: int = 0,
    out_dir=None,
    size: int = 96,
    name: str = "toy",
) -> DatasetManifest:
    """Render ``n_refs`` references and their distorted versions; write PNGs and ``<name>.csv``.

    Pseudo-MOS is ``1 - level / (MAX_LEVEL + 1)`` plus a per-kind offset in [-0.05, 0.05].
    """
    if n_refs < 2:
        raise ValueError("n_refs must be >= 2")
    if out_dir is None:
        raise ValueError("out_dir is required")
    out_dir = Path(out_dir)
    (out_dir / "refs").mkdir(parents=True, exist_ok=True)
    (out_dir / "dist").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    offsets = {k: float(rng.uniform(-0.05, 0.05)) for k in kinds}
    ref_seeds = rng.integers(0, 2**31 - 1, size=n_refs)
    records = []
    ref_paths = []
    for r in range(n_refs):
        ref_rel = f"refs/ref_{r:03d}.png"
        ref_img = synth_reference(size, int(ref_seeds[r]))
        save_image(ref_img, out_dir / ref_rel)
        ref_paths.append(ref_rel)
        for ki, kind in enumerate(kinds):
            for lv in levels:
                rel = f"dist/ref_{r:03d}_{kind}_{lv}.png"
                noise_seed = int(ref_seeds[r]) * 131 + ki * 17 + lv
                save_image(synth_distort(ref_img, kind, lv, seed=noise_seed), out_dir / rel)
                mos = 1.0 - lv / (MAX_LEVEL + 1) + offsets[kind]
                records.append(
                    ImageRecord(
                        path=rel,
                        raw_score=round(mos, 6),
                        score_type="MOS",
                        score_range=(0.0, 1.0),
                        distortion_type=kind,
                        distortion_level=int(lv),
                        domain="synthetic",
                        reference=ref_rel,
                    )
                )
    manifest = DatasetManifest(name, tuple(records), tuple(ref_paths), out_dir)
    write_manifest(manifest, out_dir / f"{name}.csv")
    return manifest
