"""Corpus recipes shared by the experiment scripts and the acceptance suite."""
from __future__ import annotations

from pathlib import Path

from .data import DISTORTION_KINDS, DatasetManifest, build_toy_corpus, load_manifest

# the quality corpus: 12 references x 4 kinds x 3 levels
TOY_CORPUS = dict(n_refs=12, kinds=DISTORTION_KINDS, levels=(1, 3, 5), seed=0, size=64, name="toy")
# encoder pretraining uses disjoint content (different reference seed) and every level
PRETRAIN_CORPUS = dict(n_refs=40, kinds=DISTORTION_KINDS, levels=(1, 2, 3, 4, 5), seed=123, size=64, name="pre")


def ensure_corpus(out_dir, recipe: dict) -> DatasetManifest:
    """Render the corpus once; later calls just reload the manifest."""
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{recipe['name']}.csv"
    if csv_path.is_file():
        return load_manifest(csv_path)
    return build_toy_corpus(out_dir=out_dir, **recipe)
