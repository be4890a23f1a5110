"""Group maximum differentiation (gMAD) search over an existing image database."""
from __future__ import annotations

import csv
import html
import io
import json
import os
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetManifest
from .pipeline import Checkpoint, file_sha256, predict_manifest

GALLERY_COLUMNS = ["level", "role", "img_a", "img_b", "att_a", "att_b", "def_a", "def_b", "mos_a", "mos_b"]


def score_database(
    checkpoint_path,
    manifest: DatasetManifest,
    n_patches: int = 50,
    seed: int = 0,
    cache_dir=None,
) -> np.ndarray:
    """One patch-averaged score per image, cached on disk by (checkpoint hash, image path)."""
    digest = file_sha256(checkpoint_path)
    cache_file = None
    cache: dict = {}
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"{digest[:32]}_p{n_patches}_s{seed}.json"
        if cache_file.is_file():
            cache = json.loads(cache_file.read_text())
    keys = [str(manifest.resolve(r)) for r in manifest.records]
    missing = [k for k in keys if k not in cache]
    if missing:
        ckpt = Checkpoint.load(checkpoint_path)
        todo = manifest.subset([r for r, k in zip(manifest.records, keys) if k in set(missing)])
        scores = predict_manifest(ckpt, todo, n_patches, seed)
        cache.update({str(todo.resolve(r)): float(s) for r, s in zip(todo.records, scores)})
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            cache_file.write_text(json.dumps(cache, sort_keys=True, indent=0))
    return np.array([cache[k] for k in keys])


@dataclass
class GmadQuery:
    attacker: np.ndarray
    defender: np.ndarray
    level_count: int = 2
    level_index: Optional[int] = None  # None searches every level
    eps: Optional[float] = None  # defaults to 2% of the defender's score range

    def __post_init__(self):
        self.attacker = np.asarray(self.attacker, dtype=np.float64)
        self.defender = np.asarray(self.defender, dtype=np.float64)
        if self.attacker.shape != self.defender.shape or self.attacker.ndim != 1:
            raise ValueError("attacker and defender score vectors must have the same length")
        if self.level_count < 1:
            raise ValueError("level_count must be >= 1")
        if self.eps is None:
            span = float(self.defender.max() - self.defender.min())
            self.eps = 0.02 * span if span > 0 else 1e-12
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class GmadResult:
    level: int  # 0 is the highest-quality bin
    pair: tuple[int, int]
    gap: float
    defender_diff: float


def quality_levels(defender: np.ndarray, level_count: int) -> np.ndarray:
    """Quantile bin of each image, 0 = best defender scores."""
    if level_count == 1:
        return np.zeros(defender.size, dtype=int)
    edges = np.quantile(defender, np.linspace(0, 1, level_count + 1)[1:-1])
    ascending = np.searchsorted(edges, defender, side="right")
    return (level_count - 1) - ascending


def _best_pair(att: np.ndarray, dfd: np.ndarray, idx: np.ndarray, eps: float):
    best = None
    for a in range(idx.size):
        for b in range(a + 1, idx.size):
            i, j = idx[a], idx[b]
            if abs(dfd[i] - dfd[j]) > eps:
                continue
            gap = abs(att[i] - att[j])
            if best is None or gap > best[1]:
                best = ((int(i), int(j)), float(gap), float(abs(dfd[i] - dfd[j])))
    return best


def gmad_pairs(query: GmadQuery) -> list[GmadResult]:
    """Per level: the pair the defender rates (near-)equal that the attacker separates most."""
    levels = quality_levels(query.defender, query.level_count)
    wanted = range(query.level_count) if query.level_index is None else [query.level_index]
    out = []
    for lv in wanted:
        if not 0 <= lv < query.level_count:
            raise ValueError(f"level_index {lv} out of range")
        idx = np.flatnonzero(levels == lv)
        if idx.size < 2:
            raise ValueError(f"level {lv} has fewer than two images")
        best = _best_pair(query.attacker, query.defender, idx, query.eps)
        if best is None:
            raise ValueError(f"level {lv} has no pair within the defender tolerance {query.eps:g}")
        out.append(GmadResult(lv, best[0], best[1], best[2]))
    return out


def level_name(level: int, level_count: int) -> str:
    if level_count == 2:
        return ("high", "low")[level]
    return str(level)


def run_gmad(scores: dict, level_count: int = 2, eps_fraction: float = 0.02) -> list[dict]:
    """All ordered (defender, attacker) model pairs x levels; returns gallery panels."""
    panels = []
    for defender, attacker in permutations(sorted(scores), 2):
        d = np.asarray(scores[defender], dtype=np.float64)
        span = float(d.max() - d.min())
        q = GmadQuery(scores[attacker], d, level_count, eps=eps_fraction * span if span > 0 else None)
        for res in gmad_pairs(q):
            panels.append(
                {"defender": defender, "attacker": attacker, "result": res, "level_count": level_count}
            )
    return panels


def _rows(panels, scores, manifest: DatasetManifest):
    rows = []
    for p in panels:
        res: GmadResult = p["result"]
        i, j = res.pair
        att, dfd = scores[p["attacker"]], scores[p["defender"]]
        ra, rb = manifest.records[i], manifest.records[j]
        rows.append(
            {
                "level": level_name(res.level, p["level_count"]),
                "role": f"defender={p['defender']};attacker={p['attacker']}",
                "img_a": ra.path,
                "img_b": rb.path,
                "att_a": repr(float(att[i])),
                "att_b": repr(float(att[j])),
                "def_a": repr(float(dfd[i])),
                "def_b": repr(float(dfd[j])),
                "mos_a": repr(float(ra.raw_score)),
                "mos_b": repr(float(rb.raw_score)),
            }
        )
    return rows


def gmad_report(panels, scores: dict, manifest: DatasetManifest, out_dir) -> tuple[Path, Path]:
    """Write ``gmad.csv`` and a static ``gmad.html`` gallery with one panel per (role, level)."""
    if not panels:
        raise ValueError("no gMAD results to report")
    out_dir = Path(out_dir)
    rows = _rows(panels, scores, manifest)
    for r in rows:
        for key in ("img_a", "img_b"):
            p = manifest.root / r[key] if not Path(r[key]).is_absolute() else Path(r[key])
            if not p.is_file():
                raise FileNotFoundError(f"gallery image missing: {p}")
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=GALLERY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    csv_path = out_dir / "gmad.csv"
    csv_path.write_text(buf.getvalue(), encoding="utf-8")

    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'><title>gMAD gallery</title>",
        "<style>body{font-family:sans-serif}.panel{display:inline-block;margin:1em;"
        "padding:.5em;border:1px solid #aaa}img{width:160px;image-rendering:pixelated}"
        "td{padding:0 .5em}</style></head><body>",
    ]
    for k, r in enumerate(rows):
        label = chr(ord("a") + k) if k < 26 else str(k)
        role = dict(x.split("=") for x in r["role"].split(";"))
        parts.append(
            f"<div class='panel'><h3>({label}) fixed {html.escape(role['defender'])} at the "
            f"{html.escape(r['level'])}-quality level; attacker {html.escape(role['attacker'])}</h3><table><tr>"
        )
        for side in ("a", "b"):
            src = os.path.relpath(manifest.root / r[f"img_{side}"], out_dir)
            parts.append(
                f"<td><img src='{html.escape(src)}' alt='{html.escape(r[f'img_{side}'])}'><br>"
                f"attacker {float(r[f'att_{side}']):.4f}<br>defender {float(r[f'def_{side}']):.4f}<br>"
                f"MOS {float(r[f'mos_{side}']):.4f}</td>"
            )
        parts.append("</tr></table></div>")
    parts.append("</body></html>\n")
    html_path = out_dir / "gmad.html"
    html_path.write_text("\n".join(parts), encoding="utf-8")
    return csv_path, html_path
