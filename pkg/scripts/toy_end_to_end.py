"""Toy end-to-end run: render corpora, pretrain the encoder, linear probe, 10-split protocol.

    python3 scripts/toy_end_to_end.py               # uses configs/toy.ini, writes runs/
    python3 scripts/toy_end_to_end.py --splits 1    # quicker single split
"""
import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from mfeiqa.config import load_config
from mfeiqa.contrastive import pretrain_encoder
from mfeiqa.experiments import PRETRAIN_CORPUS, TOY_CORPUS, ensure_corpus
from mfeiqa.pipeline import load_encoder, run_protocol, save_encoder
from mfeiqa.probe import linear_probe

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.ini"))
    ap.add_argument("--splits", type=int, default=10)
    ap.add_argument("--retrain-encoder", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    toy = ensure_corpus(cfg.path(cfg.data.manifest).parent, TOY_CORPUS)
    pre = ensure_corpus(cfg.path(cfg.data.pretrain_manifest).parent, PRETRAIN_CORPUS)

    enc_path = cfg.path(cfg.data.encoder)
    if enc_path.is_file() and not args.retrain_encoder:
        encoder = load_encoder(enc_path)
    else:
        encoder, losses = pretrain_encoder(pre, cfg.pretrain)
        save_encoder(encoder, enc_path, {"manifest": pre.name, "final_loss": losses[-1]})
    probe = linear_probe(encoder, pre, toy)
    logging.info("linear probe accuracy on the quality corpus: %.3f", probe)

    spec = dataclasses.replace(cfg.split, n_repeats=args.splits, seeds=None)
    result = run_protocol(cfg.train, toy, encoder, spec)
    summary = {
        "probe_accuracy": probe,
        "srcc": [r["srcc"] for r in result["splits"]],
        "aggregate": result["aggregate"],
        "seconds": time.perf_counter() - t0,
    }
    out = enc_path.parent.parent / "toy_end_to_end.json"
    out.write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
