"""Command-line entry points: train, finetune, extract-path, cka, report.

Every command is deterministic given (config, seed); outputs carry no
timestamps. LEGOFLOW_THREADS caps worker thread parallelism.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint
from .cka import batched_cka, cka_matrix, write_similarity_csv, write_summary_json
from .config import (
    ConfigError,
    apply_overrides,
    build_simt_config,
    build_suite,
    canonical_text,
    default_config,
    load_config,
    parse_config,
)
from .engine import MetricsWriter, Trainer, TrainingDiverged, read_metrics
from .finetune import dynamic_finetune, fixed_path_finetune
from .model import evaluate_task
from .network import dump_path, parse_path
from .tasks import dump_suite_csv, make_related_task


def _load_effective_config(args) -> dict:
    cfg = load_config(args.config) if args.config else default_config()
    return apply_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        workers=getattr(args, "workers", None),
        steps=getattr(args, "steps", None),
        mode=getattr(args, "mode", None),
        sync_bn=(False if getattr(args, "no_syncbn", False) else None),
        routing=getattr(args, "routing", None),
    )


def _prepare_out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_train(args) -> int:
    cfg = _load_effective_config(args)
    text = canonical_text(cfg)
    out_dir = _prepare_out_dir(args.out_dir)
    suite = build_suite(cfg)
    simt = build_simt_config(cfg)

    from .model import MultiTaskModel

    model = MultiTaskModel.build(suite, cfg["model"]["layers"], cfg["model"]["units"],
                                 cfg["model"]["dim"], simt.seed)
    trainer = Trainer(model, suite, simt)
    ckpt_path = os.path.join(out_dir, "ckpt.lgfw")
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.config_text != text:
            raise ConfigError("resume config differs from the checkpoint's config")
        from .checkpoint import apply_to_trainer

        apply_to_trainer(ckpt, trainer)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with MetricsWriter(metrics_path) as metrics:
        trainer.run(metrics=metrics, checkpoint_path=ckpt_path,
                    checkpoint_every=cfg["simt"]["checkpoint_every"],
                    config_text=text)
        metrics.write(trainer.summary())
    trainer.close()
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {metrics_path}")
    return 0


def _transfer_task(cfg: dict, suite):
    ft = cfg["finetune"]
    return make_related_task(suite, ft["group"], ft["task_seed"], ft["task_name"])


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    base_cfg = parse_config(ckpt.config_text)
    cfg = load_config(args.config) if args.config else base_cfg
    if args.steps is not None:
        cfg["finetune"]["steps"] = args.steps
    if args.seed is not None:
        cfg["finetune"]["task_seed"] = args.seed
    out_dir = _prepare_out_dir(args.out_dir)

    suite = build_suite(base_cfg)
    task = _transfer_task(cfg, suite)
    ft = cfg["finetune"]
    if args.dynamic:
        result = dynamic_finetune(ckpt, task, ft["steps"], base_lr=ft["base_lr"],
                                  warmup_steps=ft["warmup_steps"], seed=ft["task_seed"])
        path_file = os.path.join(out_dir, f"{task.name}.path.txt")
        with open(path_file, "w") as fh:
            fh.write(dump_path(result.path, result.model.backbone.n_units))
        print(f"path: {path_file}")
    else:
        with open(args.path) as fh:
            path, n_units = parse_path(fh.read())
        expected_layers = ckpt.structure["n_layers"]
        if len(path) != expected_layers or n_units != ckpt.structure["n_units"]:
            raise ValueError(
                f"path file declares L={len(path)} N={n_units}, checkpoint expects "
                f"L={expected_layers} N={ckpt.structure['n_units']}")
        result = fixed_path_finetune(ckpt, path, task, ft["steps"],
                                     base_lr=ft["base_lr"],
                                     warmup_steps=ft["warmup_steps"],
                                     seed=ft["task_seed"])

    metrics_path = os.path.join(out_dir, "finetune_metrics.jsonl")
    with MetricsWriter(metrics_path) as metrics:
        for record in result.records:
            metrics.write(record)
        metrics.write(result.trainer.summary())
    ckpt_out = os.path.join(out_dir, "finetuned.lgfw")
    save_checkpoint(ckpt_out, result.trainer, canonical_text(cfg))
    val = evaluate_task(result.model, task)
    print(f"final val loss: {val:.6f}")
    print(f"checkpoint: {ckpt_out}")
    print(f"metrics: {metrics_path}")
    return 0


def cmd_extract_path(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    path = model.extract_path(args.task)
    text = dump_path(path, model.backbone.n_units)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"path: {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_cka(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    model_b = None
    if args.ckpt_b:
        model_b = model_from_checkpoint(load_checkpoint(args.ckpt_b))
    cfg = parse_config(ckpt.config_text)
    suite = build_suite(cfg)
    by_name = {t.name: t for t in suite}
    if args.task not in by_name:
        raise ValueError(f"task {args.task!r} not in the checkpoint's suite")
    x, _ = by_name[args.task].dataset.split(args.split)
    if args.exact:
        sim = cka_matrix(model, args.task, x, model_b=model_b)
    else:
        sim = batched_cka(model, args.task, x, minibatches=args.minibatches,
                          model_b=model_b)
    out_dir = _prepare_out_dir(args.out_dir)
    csv_path = os.path.join(out_dir, "cka.csv")
    json_path = os.path.join(out_dir, "cka_summary.json")
    write_similarity_csv(sim, csv_path)
    write_summary_json(sim, json_path, threshold=args.block_threshold)
    print(f"similarity: {csv_path}")
    print(f"summary: {json_path}")
    return 0


def _run_label(summary: dict, fallback: str) -> str:
    mode = summary.get("mode", "?")
    sync = "syncbn" if summary.get("sync_bn") else "no-syncbn"
    return f"{fallback}[{mode},{sync},{summary.get('routing', '?')}]"


def cmd_report(args) -> int:
    runs = []
    for path in args.metrics:
        records = read_metrics(path)
        summaries = [r for r in records if r.get("summary")]
        if not summaries:
            raise ValueError(f"{path} has no summary record; rerun training to completion")
        name = os.path.splitext(os.path.basename(path))[0]
        runs.append((_run_label(summaries[-1], name), summaries[-1]))

    tasks = sorted({t for _, s in runs for t in s["val_loss"]})
    widths = [max(len("run"), *(len(label) for label, _ in runs))]
    header = ["run"] + tasks
    rows = []
    for label, summary in runs:
        rows.append([label] + [
            f"{summary['val_loss'][t]:.4f}" if t in summary["val_loss"] else "-"
            for t in tasks])

    col_w = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(col_w[i]) for i, h in enumerate(header))]
    for r in rows:
        lines.append("  ".join(c.ljust(col_w[i]) for i, c in enumerate(r)))

    lines.append("")
    lines.append("routing agreement (shared tasks, fraction of layers):")
    for i, (label_i, s_i) in enumerate(runs):
        for j in range(i + 1, len(runs)):
            label_j, s_j = runs[j]
            shared = [t for t in s_i["paths"] if t in s_j["paths"]]
            if not shared:
                continue
            agree = np.mean([
                np.mean([a == b for a, b in zip(s_i["paths"][t], s_j["paths"][t])])
                for t in shared])
            lines.append(f"  {label_i} vs {label_j}: {agree:.3f}")

    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out_dir:
        out_dir = _prepare_out_dir(args.out_dir)
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(text)
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"report: {os.path.join(out_dir, 'report.txt')}")
    return 0


def cmd_dump_suite(args) -> int:
    cfg = _load_effective_config(args)
    files = dump_suite_csv(build_suite(cfg), _prepare_out_dir(args.out_dir))
    for f in files:
        print(f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="legoflow")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_overrides=True):
        p.add_argument("--out-dir", default="legoflow-out")
        if with_overrides:
            p.add_argument("--config")
            p.add_argument("--seed", type=int)
            p.add_argument("--workers", type=int)
            p.add_argument("--steps", type=int)
            p.add_argument("--mode", choices=["simt", "per_batch"])
            p.add_argument("--no-syncbn", action="store_true")
            p.add_argument("--routing", choices=["soft", "hard"])

    p_train = sub.add_parser("train", help="run multi-task pre-training")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(fn=cmd_train)

    p_ft = sub.add_parser("finetune", help="adapt a checkpoint to a new task")
    p_ft.add_argument("--ckpt", required=True)
    p_ft.add_argument("--config")
    p_ft.add_argument("--steps", type=int)
    p_ft.add_argument("--seed", type=int)
    p_ft.add_argument("--out-dir", default="legoflow-out")
    group = p_ft.add_mutually_exclusive_group(required=True)
    group.add_argument("--dynamic", action="store_true")
    group.add_argument("--path", help="fixed routing path file")
    p_ft.set_defaults(fn=cmd_finetune)

    p_ep = sub.add_parser("extract-path", help="write a task's routing path")
    p_ep.add_argument("--ckpt", required=True)
    p_ep.add_argument("--task", required=True)
    p_ep.add_argument("--out")
    p_ep.set_defaults(fn=cmd_extract_path)

    p_cka = sub.add_parser("cka", help="layer similarity report")
    p_cka.add_argument("--ckpt", required=True)
    p_cka.add_argument("--ckpt-b")
    p_cka.add_argument("--task", required=True)
    p_cka.add_argument("--split", default="val", choices=["train", "val"])
    p_cka.add_argument("--minibatches", type=int, default=10)
    p_cka.add_argument("--exact", action="store_true")
    p_cka.add_argument("--block-threshold", type=float, default=0.8)
    p_cka.add_argument("--out-dir", default="legoflow-out")
    p_cka.set_defaults(fn=cmd_cka)

    p_rep = sub.add_parser("report", help="compare runs from metrics files")
    p_rep.add_argument("metrics", nargs="+")
    p_rep.add_argument("--out-dir")
    p_rep.set_defaults(fn=cmd_report)

    p_ds = sub.add_parser("dump-suite", help="write suite datasets as CSV")
    common(p_ds)
    p_ds.set_defaults(fn=cmd_dump_suite)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
