"""Command-line entry point: ``matdetect <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MatdetectError, StageFailure

log = logging.getLogger("matdetect")

CRNN_KEYS = {"theta_tot", "seed", "crnn_seed", "sample_rate", "duration", "frame_len", "hop", "n_fft",
             "conv_filters", "kernel", "pool", "gru_hidden", "lr", "batch_size", "max_epochs",
             "patience_train", "patience_val", "threshold"}


def _pair(text: str) -> tuple[int, int]:
    parts = [int(t) for t in text.split(",")]
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected two positive integers 'n_b,n_a', got {text!r}")
    return parts[0], parts[1]


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="flat 'key = value' config file")
    p.add_argument("--out", type=Path, default=None, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matdetect", description="Detect wall material categories from room AIRs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="group materials into categories and sweep k")
    _common(p, "output directory (default: cluster)")
    p.add_argument("--materials", type=Path, default=None, help="material file (default: bundled sample)")
    p.add_argument("--theta-tot", type=int, default=None, help="number of categories (default 10)")
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None, help="largest k in the sweep, capped at the material count")
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--out-table", type=Path, default=None, help="category table path (default: <out>/category_table.txt)")
    p.add_argument("--out-sweep", type=Path, default=None, help="sweep CSV path (default: <out>/sweep.csv)")

    p = sub.add_parser("generate", help="simulate a labelled AIR dataset")
    _common(p, "dataset directory (default: dataset)")
    p.add_argument("--materials", type=Path, default=None)
    p.add_argument("--table", type=Path, required=True, help="category table from 'cluster'")
    p.add_argument("--rooms", type=int, default=None)
    p.add_argument("--sources", type=int, default=None)
    p.add_argument("--receivers", type=int, default=None)
    p.add_argument("--max-distinct", type=int, default=None, help="limit distinct wall materials per room")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("train-crnn", help="train the CRNN detector")
    _common(p, "checkpoint path (default: crnn.ckpt)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--table", type=Path, required=True)

    p = sub.add_parser("train-baseline", help="train the Prony/SVM baseline")
    _common(p, "model directory (default: baseline)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--table", type=Path, required=True)
    p.add_argument("--orders", type=_pair, default=None,
                   help="numerator,denominator coefficient counts (default 200,200)")

    p = sub.add_parser("predict", help="detect material categories")
    _common(p, "predictions file for --manifest mode")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt", type=Path, help="CRNN checkpoint")
    g.add_argument("--baseline", type=Path, help="baseline model directory")
    p.add_argument("--table", type=Path, default=None, help="category table, adds centroid rows to --air output")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--air", type=Path, help="single WAV file")
    src.add_argument("--manifest", type=Path, help="dataset manifest")
    p.add_argument("--split", default="test", help="manifest split to predict ('all' for every record)")
    p.add_argument("--orders", type=_pair, default=(200, 200))

    p = sub.add_parser("evaluate", help="score predictions against manifest labels")
    _common(p, "metrics CSV (default: stdout)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("run", help="run the whole pipeline from one config")
    _common(p, "run directory (overrides out_dir)")
    return parser


def _load(args, allowed=None, **overrides):
    from .pipeline import load_config

    return load_config(args.config, allowed, seed=args.seed, **overrides)


def cmd_cluster(args) -> int:
    from .pipeline import stage_cluster

    cfg = _load(args, out_dir=str(args.out) if args.out else "cluster",
                materials=str(args.materials) if args.materials else None, theta_tot=args.theta_tot,
                k_min=args.k_min, k_max=args.k_max, restarts=args.restarts)
    cfg.out.mkdir(parents=True, exist_ok=True)
    record: dict = {}
    stage_cluster(cfg, record, args.out_table, args.out_sweep)
    print(json.dumps(record["cluster"]))
    print(f"category table: {args.out_table or cfg.table_path}")
    return 0


def cmd_generate(args) -> int:
    from .clustering import load_category_table
    from .material_db import load_materials
    from .room_sim import generate_dataset

    cfg = _load(args, materials=str(args.materials) if args.materials else None, rooms=args.rooms,
                sources=args.sources, receivers=args.receivers, max_distinct_materials=args.max_distinct,
                workers=args.workers)
    out = args.out or Path("dataset")
    manifest = generate_dataset(cfg.rooms, load_materials(cfg.materials), load_category_table(args.table),
                                cfg.sim_config(), out, cfg.sources, cfg.receivers, cfg.sim_seed, cfg.split_ratios,
                                (cfg.room_min, cfg.room_max), cfg.wall_margin, cfg.min_src_rcv_dist,
                                cfg.max_distinct_materials, cfg.workers)
    print(f"{len(manifest)} AIRs in {out}; " + ", ".join(f"{s}={len(manifest.split(s))}"
                                                        for s in ("train", "val", "test")))
    return 0


def cmd_train_crnn(args) -> int:
    from .clustering import load_category_table
    from .dataset import load_manifest
    from .detector import save_checkpoint, train

    table = load_category_table(args.table)
    cfg = _load(args, CRNN_KEYS)
    if cfg.theta_tot != table.theta_tot:
        cfg.theta_tot = table.theta_tot
    model, report = train(load_manifest(args.manifest), table, cfg.crnn_config())
    out = args.out or Path("crnn.ckpt")
    save_checkpoint(model, out, report)
    print(f"stopped: {report.stop_reason} after {len(report.train_loss)} epochs; "
          f"kept epoch {report.selected_epoch}; checkpoint {out}")
    return 0


def cmd_train_baseline(args) -> int:
    from .baseline import save_svm, train_baseline
    from .clustering import load_category_table
    from .dataset import load_manifest

    cfg = _load(args, {"seed", "iir_orders", "svm_lam", "svm_epochs", "svm_step"},
                iir_orders=args.orders)
    table = load_category_table(args.table)
    out = args.out or Path("baseline")
    out.mkdir(parents=True, exist_ok=True)
    models = train_baseline(load_manifest(args.manifest), table.theta_tot, tuple(cfg.iir_orders), out / "iir",
                            lam=cfg.svm_lam, epochs=cfg.svm_epochs, step=cfg.svm_step)
    for theta, m in enumerate(models):
        save_svm(m, out / f"svm_theta{theta}.bin", theta)
    print(f"{len(models)} SVMs in {out}")
    return 0


def cmd_predict(args) -> int:
    from .dataset import load_manifest, read_air
    from .evaluation import write_predictions
    from .pipeline import load_baseline, predict_split

    if args.manifest is not None:
        manifest = load_manifest(args.manifest)
        split = None if args.split == "all" else args.split
        paths, present, post = predict_split(manifest, split, ckpt=args.ckpt, baseline_dir=args.baseline,
                                             iir_orders=args.orders)
        out = args.out or Path("predictions.jsonl")
        write_predictions(out, paths, present, post)
        print(f"{len(paths)} predictions in {out}")
        return 0

    air = read_air(args.air)
    if args.ckpt is not None:
        from .detector import load_checkpoint, predict_posteriors

        model = load_checkpoint(args.ckpt)
        scores = predict_posteriors(model, air)
        present = scores >= model.cfg.thresholds()
    else:
        from .baseline import iir_features

        models = load_baseline(args.baseline)
        x = iir_features(air, args.orders)[None]
        scores = np.array([m.decision_function(x)[0] for m in models])
        present = scores >= 0.0
    # one line per category, then the absorption rows of the detected categories
    print("theta,posterior,present" if args.ckpt is not None else "theta,svm_score,present")
    for theta, (v, on) in enumerate(zip(scores, present)):
        print(f"{theta},{v:.6f},{int(on)}")
    if args.table is not None:
        from .clustering import load_category_table
        from .detector import select_rows

        result = select_rows(np.where(present, 1.0, 0.0), load_category_table(args.table), 0.5)
        for theta, row in zip(np.flatnonzero(present), result.a_hat):
            print(f"a_hat[{theta}]," + ",".join(f"{a:.6f}" for a in row))
    return 0


def cmd_evaluate(args) -> int:
    from .dataset import load_manifest
    from .evaluation import evaluate_predictions, metrics_csv, read_predictions

    split = None if args.split == "all" else args.split
    metrics = evaluate_predictions(load_manifest(args.manifest), read_predictions(args.predictions), split)
    text = metrics_csv(metrics)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for c, what in metrics.zero_division:
        log.warning("category %d: %s has a zero denominator, reported as 0", c, what)
    print(f"macro F1 {metrics.macro_f1:.4f}", file=sys.stderr)
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_pipeline

    cfg = _load(args, out_dir=str(args.out) if args.out else None)
    run = run_pipeline(cfg)
    table = cfg.out / "table2.txt"
    if table.exists():
        print(table.read_text(encoding="utf-8"), end="")
    print(f"run record: {cfg.out / 'run_record.json'}" + (f" (reused: {', '.join(run.reused)})" if run.reused else ""))
    return 0


COMMANDS = {
    "cluster": cmd_cluster,
    "generate": cmd_generate,
    "train-crnn": cmd_train_crnn,
    "train-baseline": cmd_train_baseline,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"matdetect: config error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"matdetect: stage {exc.stage} failed: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 3
    except (MatdetectError, OSError, ValueError) as exc:
        print(f"matdetect {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
