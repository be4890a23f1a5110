"""Plain-CNN baseline on the toy corpus: checks that the toy SRCC threshold is attainable at all.

Four conv-BN-ReLU layers, global pooling and a linear output, trained with MAE on 32 px patches;
no high-frequency branch, no attentional fusion, no distortion embedding.

    python3 scripts/baseline_cnn.py --splits 3
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from mfeiqa.experiments import TOY_CORPUS, ensure_corpus
from mfeiqa.metrics import srcc
from mfeiqa.pipeline import SplitSpec, image_tensor, make_splits, sample_patches

ROOT = Path(__file__).resolve().parents[1]


def block(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.BatchNorm2d(cout), nn.ReLU()]


def baseline_split(train_m, test_m, steps=1000, patch=32, lr=1e-3, seed=0):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = nn.Sequential(
        *block(3, 16, 1), *block(16, 32, 2), *block(32, 64, 2), *block(64, 64, 2),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(64, 1),
    )
    imgs = [image_tensor(train_m, r) for r in train_m.records]
    y = torch.tensor(train_m.scores(), dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr)
    net.train()
    for _ in range(steps):
        idx = rng.integers(0, len(imgs), 32)
        x = torch.stack([sample_patches(imgs[i], 1, patch, int(rng.integers(1 << 30)))[0] for i in idx])
        loss = (net(x).squeeze(-1) - y[idx]).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    with torch.no_grad():
        preds = [net(sample_patches(image_tensor(test_m, r), 8, patch, k)).mean().item()
                 for k, r in enumerate(test_m.records)]
    return srcc(preds, test_m.scores())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--corpus-dir", default=str(ROOT / "runs" / "toy"))
    ap.add_argument("--splits", type=int, default=3)
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    torch.set_num_threads(1)
    toy = ensure_corpus(args.corpus_dir, TOY_CORPUS)
    t0 = time.perf_counter()
    scores = [baseline_split(tr, te, args.steps) for tr, te in make_splits(toy, SplitSpec(n_repeats=args.splits))]
    print(json.dumps({"srcc": scores, "median": float(np.median(scores)), "seconds": time.perf_counter() - t0}))


if __name__ == "__main__":
    main()
