"""Command-line front end: generate, train-stage1, train-stage2, evaluate,
ablate, report."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config
from .data import fold_data, generate_benchmark, read_bundle, write_bundle
from .discovery import read_assignments, stage1_train, write_assignments
from .pipeline import (
    Stage1Result,
    evaluate,
    load_stage1_model,
    load_stage2_model,
    run_ablation,
    save_stage1_checkpoint,
    save_stage2_checkpoint,
    train_stage2,
)
from .report import (
    format_ablation_table,
    normalized_mutual_information,
    permutation_matched_accuracy,
    write_confusion_csv,
    write_curve_csv,
    write_metric_lines,
)


def _config(args) -> TrainConfig:
    return load_config(args.config) if args.config else TrainConfig()


def _cmd_generate(args) -> int:
    c, h, w = (int(v) for v in args.size.split(","))
    bundle = generate_benchmark(args.seed, args.domains, args.classes,
                                args.per_cell, (c, h, w))
    write_bundle(bundle, args.out)
    print(f"wrote {len(bundle.samples)} samples "
          f"({bundle.domains} domains x {bundle.classes} classes) to {args.out}")
    return 0


def _cmd_train_stage1(args) -> int:
    cfg = _config(args)
    bundle = read_bundle(args.data)
    fold = fold_data(bundle, args.held_out)
    result = stage1_train(fold, cfg, args.seed)
    save_stage1_checkpoint(args.out_checkpoint, result, fold, cfg)
    write_assignments(args.out_assignments, result.assignments)
    # discovery quality: evaluation-only reading of the hidden domain ids
    true_domains = np.array([bundle.samples[i].true_domain for i in fold.source_idx])
    recovered = result.assignments.argmax(axis=1)
    matched = permutation_matched_accuracy(true_domains, recovered)
    nmi = normalized_mutual_information(true_domains, recovered)
    print(f"stage 1 done: val accuracy {result.val_accuracy:.4f}, "
          f"predictor fit {result.predictor_fit:.4f}, "
          f"discovery matched accuracy {matched:.4f}, NMI {nmi:.4f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metric_lines(out / f"discovery_fold{args.held_out}.txt", [{
            "record": "discovery_quality", "fold": args.held_out,
            "matched_accuracy": matched, "nmi": nmi,
            "val_accuracy": result.val_accuracy,
            "predictor_fit": result.predictor_fit,
        }])
        write_curve_csv(out / f"stage1_loss_fold{args.held_out}.csv",
                        result.curves["train_loss"])
        write_curve_csv(out / f"stage1_entropy_fold{args.held_out}.csv",
                        result.curves["entropy"])
    return 0


def _cmd_train_stage2(args) -> int:
    cfg = _config(args)
    bundle = read_bundle(args.data)
    fold = fold_data(bundle, args.held_out)
    stage1 = None
    if cfg.sdnorm:
        encoder, predictor, held = load_stage1_model(args.checkpoint, cfg)
        if held != args.held_out:
            print(f"error: checkpoint trained for fold {held}, not {args.held_out}",
                  file=sys.stderr)
            return 2
        assignments = read_assignments(args.assignments)
        stage1 = Stage1Result(
            encoder=encoder, predictor=predictor, assignments=assignments,
            source_idx=fold.source_idx, bootstrap_labels=np.array([]),
            predictor_fit=0.0, val_accuracy=0.0,
        )
    model = train_stage2(fold, cfg, args.seed, stage1)
    save_stage2_checkpoint(args.out_checkpoint, model, fold, cfg)
    print(f"stage 2 done: best val accuracy "
          f"{max(model.curves['val_accuracy']):.4f} at epoch {model.best_epoch}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_curve_csv(out / f"stage2_loss_fold{args.held_out}.csv",
                        model.curves["train_total"])
        write_curve_csv(out / f"stage2_val_fold{args.held_out}.csv",
                        model.curves["val_accuracy"])
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _config(args)
    bundle = read_bundle(args.data)
    model, held_out = load_stage2_model(args.checkpoint, cfg)
    fold = fold_data(bundle, held_out)
    result = evaluate(model, fold, cfg)
    print(f"fold {held_out}: accuracy {result.accuracy:.4f} "
          f"on {fold.test_x.shape[0]} target samples")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metric_lines(out / f"metrics_fold{held_out}.txt", [{
            "record": "fold_eval", "fold": held_out,
            "accuracy": result.accuracy, "n_test": fold.test_x.shape[0],
        }])
        write_confusion_csv(out / f"confusion_fold{held_out}.csv", result.confusion)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _config(args)
    bundle = read_bundle(args.data)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else cfg.seeds
    started = time.monotonic()
    report = run_ablation(bundle, cfg, seeds)
    elapsed = time.monotonic() - started
    table = format_ablation_table(report.rows)
    print(table, end="")
    print(f"(grid completed in {elapsed:.1f}s over seeds {list(seeds)})")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation_table.txt", "w", encoding="utf-8") as fh:
            fh.write(table)
        records = []
        for row in report.rows:
            record = {"record": "ablation_row", "sdnorm": int(row["sdnorm"]),
                      "protogr": int(row["protogr"]), "protoccl": int(row["protoccl"])}
            for key, value in row.items():
                if isinstance(key, int):
                    record[f"fold{key}"] = value
            record["mean"] = row["mean"]
            records.append(record)
        write_metric_lines(out / "ablation_metrics.txt", records)
    return 0


def _cmd_report(args) -> int:
    """Summarize per-fold metric files into one line-delimited report."""
    records = []
    accs = []
    for path in sorted(Path(args.runs).glob("metrics_fold*.txt")):
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                fields = dict(part.split("=", 1) for part in line.split())
                if fields.get("record") == "fold_eval":
                    accs.append(float(fields["accuracy"]))
                    records.append({"record": "fold_eval", "fold": int(fields["fold"]),
                                    "accuracy": float(fields["accuracy"])})
    if not accs:
        print(f"no metrics_fold*.txt files under {args.runs}", file=sys.stderr)
        return 2
    records.append({"record": "summary", "folds": len(accs),
                    "mean_accuracy": float(np.mean(accs))})
    write_metric_lines(args.out, records)
    print(f"mean accuracy over {len(accs)} folds: {np.mean(accs):.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="comen",
        description="Compound domain generalization on a synthetic benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a benchmark file")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-cell", type=int, default=40)
    p.add_argument("--size", default="3,16,16", help="C,H,W")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train-stage1", help="latent domain discovery")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--held-out", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-assignments", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(fn=_cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="prototype-relational training")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--held-out", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--checkpoint", help="stage-1 checkpoint (required with sdnorm)")
    p.add_argument("--assignments", help="stage-1 assignments file")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(fn=_cmd_train_stage2)

    p = sub.add_parser("evaluate", help="held-out domain accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("ablate", help="full component grid over all folds")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", help="comma-separated, e.g. 7,8,9")
    p.add_argument("--out-dir")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("report", help="merge per-fold metrics")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
