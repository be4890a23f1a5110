"""Command-line entry point: ``mfeiqa <command> [options]``.

Exit codes: 0 success, 1 execution failure, 2 usage error. Errors are reported on stderr as one
JSON object ``{"error": ..., "message": ...}``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import RunConfig, dump_config, load_config
from .contrastive import pretrain_encoder
from .data import DISTORTION_KINDS, build_toy_corpus, load_manifest
from .pipeline import (
    Checkpoint,
    aggregate,
    evaluate_split,
    file_sha256,
    load_encoder,
    run_protocol,
    save_encoder,
    train,
)

log = logging.getLogger("mfeiqa")

REPORT_FORMAT = "mfeiqa-run-report"


class UsageError(Exception):
    pass


class OutputExists(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="INI config file")
    g.add_argument("--seed", type=int, help="seed for pretraining, training and inference")
    g.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    g.add_argument("--force", action="store_true", help="overwrite existing outputs")
    g.add_argument("--fusion", choices=("aff", "add"), help="fusion rule in every fusion module")
    g.add_argument("--hf-conv", choices=("octave", "vanilla"), help="convolution type of the HF branch")
    g.add_argument("--no-hfen", action="store_true", help="drop the high-frequency branch")
    g.add_argument("--no-dan", action="store_true", help="drop the distortion-aware branch")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override one config value (repeatable)")
    g.add_argument("--workers", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="mfeiqa", description="No-reference image quality assessment toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("make-toy", parents=[common], help="render a synthetic distortion corpus")
    p.add_argument("--n-refs", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--levels", default="1,3,5")
    p.add_argument("--kinds", default=",".join(DISTORTION_KINDS))
    p.add_argument("--name", default="toy")

    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining of the distortion encoder")
    p.add_argument("--manifest", help="pretraining manifest (default: data.pretrain_manifest)")

    p = sub.add_parser("train", parents=[common], help="train one quality model on a full manifest")
    p.add_argument("--manifest", help="training manifest (default: data.manifest)")

    sub.add_parser("eval", parents=[common], help="run the repeated-split protocol and write a RunReport")

    p = sub.add_parser("cross-eval", parents=[common], help="train on one manifest, test on others")
    p.add_argument("--test", action="append", default=[], help="test manifest (repeatable)")

    p = sub.add_parser("gmad", parents=[common], help="gMAD competition between two checkpoints")
    p.add_argument("--model", action="append", default=[], metavar="NAME=CHECKPOINT",
                   help="competing model (give exactly two)")
    p.add_argument("--database", help="database manifest (default: data.manifest)")

    p = sub.add_parser("report", parents=[common], help="tables and plots from a RunReport")
    p.add_argument("run_report", help="run_report.json written by eval")
    return parser


# --- helpers ---------------------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.FIELD=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    if args.seed is not None:
        for k in ("train.seed", "pretrain.seed", "gmad.seed"):
            out[k] = str(args.seed)
    if args.fusion is not None:
        out["train.addition_fusion"] = str(args.fusion == "add")
    if args.hf_conv is not None:
        out["train.vanilla_conv"] = str(args.hf_conv == "vanilla")
    if args.no_hfen:
        out["train.no_hfen"] = "true"
    if args.no_dan:
        out["train.no_dan"] = "true"
    return out


def _load_run_config(args) -> RunConfig:
    try:
        return load_config(args.config, _overrides(args))
    except (FileNotFoundError, KeyError, ValueError, TypeError) as e:
        raise UsageError(f"config: {e}") from e


def _claim(out_dir: Path, names: Sequence[str], force: bool) -> list[Path]:
    paths = [out_dir / n for n in names]
    taken = [str(p) for p in paths if p.exists()]
    if taken and not force:
        raise OutputExists(f"{', '.join(taken)} exists; use --force")
    out_dir.mkdir(parents=True, exist_ok=True)
    return paths


def _require(cfg: RunConfig, value: Optional[str], what: str) -> Path:
    if not value:
        raise UsageError(f"no {what} given")
    return cfg.path(value)


def _encoder(cfg: RunConfig):
    if cfg.train.no_dan:
        return None
    return load_encoder(_require(cfg, cfg.data.encoder, "encoder (data.encoder)"))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- commands --------------------------------------------------------------------


def cmd_make_toy(args, cfg: RunConfig) -> dict:
    out = Path(args.out_dir)
    _claim(out, [f"{args.name}.csv"], args.force)
    levels = tuple(int(x) for x in args.levels.split(","))
    kinds = tuple(k.strip() for k in args.kinds.split(","))
    m = build_toy_corpus(args.n_refs, kinds, levels, seed=cfg.pretrain.seed if args.seed is None else args.seed,
                         out_dir=out, size=args.size, name=args.name)
    return {"manifest": str(out / f"{args.name}.csv"), "images": len(m)}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    manifest = load_manifest(args.manifest or _require(cfg, cfg.data.pretrain_manifest, "pretraining manifest"))
    enc_path, loss_path = _claim(Path(args.out_dir), ["encoder.safetensors", "pretrain_loss.csv"], args.force)
    encoder, losses = pretrain_encoder(manifest, cfg.pretrain)
    save_encoder(encoder, enc_path, {"manifest": manifest.name, "steps": cfg.pretrain.steps})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    w.writerows([k, repr(v)] for k, v in enumerate(losses))
    loss_path.write_text(buf.getvalue(), encoding="utf-8")
    return {"encoder": str(enc_path), "final_loss": losses[-1] if losses else None}


def cmd_train(args, cfg: RunConfig) -> dict:
    manifest = load_manifest(args.manifest or _require(cfg, cfg.data.manifest, "training manifest"))
    (ckpt_path, hist_path) = _claim(Path(args.out_dir), ["model.safetensors", "train_history.csv"], args.force)
    ckpt = train(cfg.train, manifest, _encoder(cfg))
    ckpt.save(ckpt_path)
    hist = ckpt.meta["history"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "loss"])
    w.writerows([k, repr(lr), repr(l)] for k, (lr, l) in enumerate(zip(hist["lr"], hist["epoch_loss"])))
    hist_path.write_text(buf.getvalue(), encoding="utf-8")
    return {"checkpoint": str(ckpt_path), "epoch_loss": hist["epoch_loss"]}


def run_report(cfg: RunConfig, result: dict, artifacts: dict) -> dict:
    """The machine-readable record of one eval run (no wall-clock data, so reruns are bit-identical)."""
    return {
        "format": REPORT_FORMAT,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "splits": result["splits"],
        "aggregate": result["aggregate"],
        "artifacts": artifacts,
    }


def report_csv(report: dict) -> str:
    """Split table plus one aggregate (median) row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "srcc", "plcc", "n_train", "n_test"])
    for row in report["splits"]:
        w.writerow([row["split"], repr(row["srcc"]), repr(row["plcc"]), row["n_train"], row["n_test"]])
    agg = report["aggregate"]
    w.writerow(["median", repr(agg["srcc"]["median"]), repr(agg["plcc"]["median"]), "", ""])
    return buf.getvalue()


def check_report(report: dict, tol: float = 1e-12) -> None:
    """Raise if the stored aggregates do not follow from the per-split rows."""
    for metric in ("srcc", "plcc"):
        fresh = aggregate([r[metric] for r in report["splits"]])
        for k, v in fresh.items():
            if abs(report["aggregate"][metric][k] - v) > tol:
                raise ValueError(f"aggregate {metric}.{k} does not match the split rows")


def cmd_eval(args, cfg: RunConfig) -> dict:
    manifest_path = _require(cfg, cfg.data.manifest, "manifest (data.manifest)")
    manifest = load_manifest(manifest_path)
    json_path, csv_path, timing_path = _claim(
        Path(args.out_dir), ["run_report.json", "run_report.csv", "timing.json"], args.force
    )
    encoder = _encoder(cfg)
    t0 = time.perf_counter()
    result = run_protocol(cfg.train, manifest, encoder, cfg.split)
    elapsed = time.perf_counter() - t0
    artifacts = {"manifest_sha256": file_sha256(manifest_path)}
    if encoder is not None:
        artifacts["encoder_sha256"] = file_sha256(cfg.path(cfg.data.encoder))
    report = run_report(cfg, result, artifacts)
    _write_json(json_path, report)
    csv_path.write_text(report_csv(report), encoding="utf-8")
    _write_json(timing_path, {"seconds": elapsed, "splits": len(result["splits"])})
    return {"report": str(json_path), "median_srcc": result["aggregate"]["srcc"]["median"],
            "median_plcc": result["aggregate"]["plcc"]["median"]}


def cmd_cross_eval(args, cfg: RunConfig) -> dict:
    train_path = _require(cfg, cfg.data.manifest, "training manifest (data.manifest)")
    tests = list(args.test) or [str(cfg.path(t)) for t in cfg.data.test_manifests]
    if not tests:
        raise UsageError("no test manifests given (--test or data.test_manifests)")
    train_m = load_manifest(train_path)
    test_ms = [load_manifest(t) for t in tests]
    for t in test_ms:
        if t.name == train_m.name:
            raise UsageError(f"test manifest {t.name!r} has the same name as the training manifest")
    json_path, csv_path = _claim(Path(args.out_dir), ["cross_eval.json", "cross_eval.csv"], args.force)
    ckpt = train(cfg.train, train_m, _encoder(cfg))
    rows = []
    for t in test_ms:
        s, p, _ = evaluate_split(ckpt, t, seed=cfg.train.seed)
        rows.append({"train": train_m.name, "test": t.name, "srcc": s, "plcc": p, "n_test": len(t)})
    _write_json(json_path, {"config": cfg.to_dict(), "results": rows})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["train", "test", "srcc", "plcc", "n_test"], lineterminator="\n")
    w.writeheader()
    w.writerows({**r, "srcc": repr(r["srcc"]), "plcc": repr(r["plcc"])} for r in rows)
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    return {"results": rows}


def cmd_gmad(args, cfg: RunConfig) -> dict:
    from .gmad import gmad_report, run_gmad, score_database

    if len(args.model) != 2:
        raise UsageError("gmad needs exactly two --model NAME=CHECKPOINT entries")
    models = {}
    for item in args.model:
        if "=" not in item:
            raise UsageError(f"--model expects NAME=CHECKPOINT, got {item!r}")
        name, path = item.split("=", 1)
        models[name] = Path(path)
    if len(models) != 2:
        raise UsageError("the two models need distinct names")
    database = load_manifest(args.database or _require(cfg, cfg.data.manifest, "database manifest"))
    out = Path(args.out_dir)
    _claim(out, ["gmad.csv", "gmad.html"], args.force)
    g = cfg.gmad
    cache = cfg.path(g.cache_dir) if g.cache_dir else None
    scores = {n: score_database(p, database, g.n_patches, g.seed, cache) for n, p in models.items()}
    panels = run_gmad(scores, g.level_count, g.eps_fraction)
    csv_path, html_path = gmad_report(panels, scores, database, out)
    return {"csv": str(csv_path), "html": str(html_path), "panels": len(panels)}


def _plots(report: dict, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    fig, ax = plt.subplots(figsize=(5, 5))
    for row in report["splits"]:
        ax.scatter(row["objective"], row["predictions"], s=10, alpha=0.6, label=f"split {row['split']}")
    ax.set_xlabel("objective score (normalized)")
    ax.set_ylabel("predicted score")
    ax.set_title(f"median SRCC {report['aggregate']['srcc']['median']:.3f}")
    if len(report["splits"]) <= 10:
        ax.legend(fontsize=6)
    fig.tight_layout()
    for ext in ("png", "svg"):
        p = out / f"scatter.{ext}"
        fig.savefig(p, metadata={"Date": None} if ext == "svg" else None)
        written.append(p)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for row in report["splits"]:
        ax.plot(np.arange(1, len(row["epoch_loss"]) + 1), row["epoch_loss"], marker="o", label=f"split {row['split']}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    for ext in ("png", "svg"):
        p = out / f"loss.{ext}"
        fig.savefig(p, metadata={"Date": None} if ext == "svg" else None)
        written.append(p)
    plt.close(fig)
    return written


def cmd_report(args, cfg: RunConfig) -> dict:
    src = Path(args.run_report)
    if not src.is_file():
        raise FileNotFoundError(f"run report not found: {src}")
    report = json.loads(src.read_text(encoding="utf-8"))
    if report.get("format") != REPORT_FORMAT:
        raise ValueError(f"{src} is not a run report")
    check_report(report)
    out = Path(args.out_dir)
    (csv_path,) = _claim(out, ["report.csv"], args.force)
    csv_path.write_text(report_csv(report), encoding="utf-8")
    plots = _plots(report, out)
    return {"csv": str(csv_path), "plots": [str(p) for p in plots]}


COMMANDS = {
    "make-toy": cmd_make_toy,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "gmad": cmd_gmad,
    "report": cmd_report,
}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail(2, "usage", str(e))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        cfg = _load_run_config(args)
        log.debug("effective config:\n%s", dump_config(cfg))
        result = COMMANDS[args.command](args, cfg)
    except UsageError as e:
        return _fail(2, "usage", str(e))
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error
        log.debug("command failed", exc_info=True)
        return _fail(1, type(e).__name__, str(e))
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
