"""Train the full model and the two fusion/convolution ablations on every split of one manifest.

Writes ``ablation.json`` with per-split SRCC for each variant and a win count for the full model.

    python3 scripts/run_ablation.py --config configs/toy.ini --out runs/ablation
"""
import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from mfeiqa.config import load_config
from mfeiqa.data import load_manifest
from mfeiqa.pipeline import load_encoder, run_protocol

VARIANTS = {
    "full": {},
    "add": {"addition_fusion": True},
    "vanilla": {"vanilla_conv": True},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, dict(s.split("=", 1) for s in args.set))
    manifest = load_manifest(cfg.path(cfg.data.manifest))
    encoder = load_encoder(cfg.path(cfg.data.encoder))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    for name, change in VARIANTS.items():
        t0 = time.perf_counter()
        res = run_protocol(dataclasses.replace(cfg.train, **change), manifest, encoder, cfg.split)
        result[name] = {
            "srcc": [r["srcc"] for r in res["splits"]],
            "median_srcc": res["aggregate"]["srcc"]["median"],
            "seconds": time.perf_counter() - t0,
        }
        logging.info("%s: %s", name, json.dumps(result[name]))
    full = result["full"]["srcc"]
    for name in ("add", "vanilla"):
        result[f"full_wins_vs_{name}"] = sum(f >= o for f, o in zip(full, result[name]["srcc"]))
    (out / "ablation.json").write_text(json.dumps(result, indent=2))
    print(json.dumps({k: v for k, v in result.items() if k.startswith("full_wins")}))


if __name__ == "__main__":
    main()
