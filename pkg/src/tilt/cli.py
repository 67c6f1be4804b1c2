"""Command-line entry points.

    tilt pretrain|finetune|eval|predict|synth|ablate --config <file>
         [--preset <name>] [--seed N] [--scale F] [--out <path>]

Training commands write a checkpoint, a JSON-lines step log and a loss
curve PNG. ``eval`` and ``ablate`` write a JSON report, a TSV table and a
figure next to it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import plotting
from .checkpoint import config_mismatch, load_checkpoint, load_into, save_checkpoint
from .layout import save_dataset
from .metrics import METRICS, EvalReport, anls, exact_match
from .model import Tilt
from .objectives import to_seq2seq
from .synth import synth_corpus
from .training import (
    PRESETS,
    PretrainSource,
    RunConfig,
    SupervisedSource,
    TrainResult,
    ablate,
    ablation_config,
    apply_preset,
    build_model,
    evaluate,
    exact_match_rate,
    load_documents,
    predict,
    supervised_set,
    train,
)

log = logging.getLogger("tilt")


class ConfigMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# commands


def _open_log(path: str | None):
    if path is None:
        return nullcontext(None)
    if path == "-":
        return nullcontext(sys.stdout)
    return open(path, "w")


def _finish_training(model: Tilt, cfg: RunConfig, result: TrainResult, out: str | Path) -> Path:
    run = {k: v for k, v in cfg.to_dict().items() if k != "model"}
    run["steps_run"] = result.steps_run
    save_checkpoint(out, model, cfg.model, result.optimizer, run)
    return Path(out)


def _init_from(model: Tilt, cfg: RunConfig) -> None:
    if not cfg.init_checkpoint:
        return
    ckpt = load_checkpoint(cfg.init_checkpoint)
    diff = config_mismatch(ckpt.config, cfg.model)
    if diff:
        raise ConfigMismatchError(f"{cfg.init_checkpoint} was trained with a different model config: {', '.join(diff)}")
    load_into(model, ckpt)


def cmd_pretrain(cfg: RunConfig, out: str | Path, log_path: str | None = None) -> TrainResult:
    """Salient-span corruption training on the documents in ``cfg.train_paths``."""
    docs = [d for d in load_documents(cfg.train_paths) if d.words]
    if not docs:
        raise ValueError("pretraining corpus is empty: no documents with words in " + ", ".join(cfg.train_paths))
    model = build_model(cfg)
    _init_from(model, cfg)
    with _open_log(log_path) as stream:
        result = train(model, PretrainSource(cfg, docs), cfg, stream)
    _finish_training(model, cfg, result, out)
    return result


def cmd_finetune(cfg: RunConfig, out: str | Path, log_path: str | None = None) -> TrainResult:
    """Supervised seq2seq training on every annotation in ``cfg.train_paths``."""
    docs = load_documents(cfg.train_paths)
    examples = supervised_set(docs, cfg)
    if not examples:
        raise ValueError("no annotated examples in " + ", ".join(cfg.train_paths))
    model = build_model(cfg)
    _init_from(model, cfg)
    with _open_log(log_path) as stream:
        on_eval = None
        if cfg.early_stop_em is not None:
            plain = supervised_set(docs, replace(cfg, case_augment=False))
            on_eval = lambda m, step: exact_match_rate(m, plain)  # noqa: E731
        result = train(model, SupervisedSource(cfg, examples), cfg, stream, on_eval=on_eval)
    _finish_training(model, cfg, result, out)
    return result


def load_model(path: str | Path) -> Tilt:
    """Rebuild a model from a checkpoint, honouring its ablation switches."""
    ckpt = load_checkpoint(path)
    model = Tilt(
        ckpt.config,
        spatial_bias=not ckpt.run.get("disable_spatial_bias", False),
        vision=not ckpt.run.get("disable_vision", False),
    )
    load_into(model, ckpt)
    model.eval()
    return model


def cmd_eval(checkpoint: str | Path, data: Sequence[str], metric: str) -> EvalReport:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
    model = load_model(checkpoint)
    return evaluate(model, load_documents(data), metric)


def cmd_predict(checkpoint: str | Path, data: Sequence[str]) -> list[dict]:
    model = load_model(checkpoint)
    docs = load_documents(data)
    pairs = [(d, a) for d in docs for a in d.annotations]
    preds = predict(model, [to_seq2seq(d, a, model.cfg.max_src_len) for d, a in pairs])
    return [{"doc": d.id, "task": a.task, "prompt": a.prompt, "pred": p} for (d, a), p in zip(pairs, preds)]


def cmd_synth(kind: str, n: int, seed: int, out: str | Path) -> int:
    return save_dataset(synth_corpus(kind, n, seed), out)


def cmd_ablate(cfg: RunConfig, seeds: Sequence[int] = (0, 1), n_test: int = 300) -> dict:
    def progress(run):
        log.info("%s %s seed=%d em=%.3f (%.0fs)", run.task, run.variant, run.seed, run.exact_match, run.seconds)

    return ablate(cfg, seeds, n_test, progress=progress)


# ---------------------------------------------------------------------------
# reports


def _write_tsv(rows: Sequence[dict], path: Path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], list) else "|".join(map(str, r[c])) for c in columns])


def per_example_scores(report: EvalReport) -> list[float]:
    if report.metric == "anls":
        return [anls(r["pred"], r["golds"]) if r["golds"] else 0.0 for r in report.records]
    return [exact_match(r["pred"], r["golds"]) for r in report.records]


def write_eval_report(report: EvalReport, out: Path) -> list[Path]:
    out.write_text(report.to_json())
    tsv, png = out.with_suffix(".tsv"), out.with_suffix(".png")
    _write_tsv(report.records, tsv, ["doc", "field", "pred", "golds"])
    plotting.score_histogram(per_example_scores(report), report.metric, png)
    return [out, tsv, png]


def write_ablation_report(result: dict, out: Path) -> list[Path]:
    out.write_text(json.dumps(result, indent=2))
    tsv, png = out.with_suffix(".tsv"), out.with_suffix(".png")
    _write_tsv(result["summary"], tsv, ["task", "variant", "mean", "spread", "runs"])
    plotting.ablation_bars(result["summary"], png)
    return [out, tsv, png]


# ---------------------------------------------------------------------------
# argument handling


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then preset, then command-line overrides."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset, args.scale)
    elif args.scale != 1.0:
        cfg = replace(
            cfg,
            steps=max(1, round(cfg.steps * args.scale)),
            batch_size=max(1, round(cfg.batch_size * args.scale)),
        )
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "data", None) and args.command in ("pretrain", "finetune"):
        cfg = replace(cfg, train_paths=list(args.data))
    if getattr(args, "init", None):
        cfg = replace(cfg, init_checkpoint=args.init)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilt", description="Text-image-layout transformer tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_default: str) -> None:
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--preset", choices=sorted(PRESETS), help="finetuning hyperparameter preset")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--scale", type=float, default=1.0, help="multiply steps and batch size")
        p.add_argument("--out", default=out_default, help=f"output path (default {out_default})")

    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, help=f"{name} and write a checkpoint")
        common(p, f"{name}.ckpt")
        p.add_argument("--data", nargs="+", help="dataset JSONL files (override train_paths)")
        p.add_argument("--init", help="initial checkpoint (overrides init_checkpoint)")
        p.add_argument("--log", help="step log path, '-' for stdout (default <out>.log.jsonl)")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p, "report.json")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", help="dataset JSONL files (default: eval_paths)")
    p.add_argument("--metric", help=f"one of {', '.join(METRICS)} (default: config metric)")

    p = sub.add_parser("predict", help="greedy answers for every annotation")
    common(p, "-")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", help="dataset JSONL files (default: eval_paths)")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, "synth.jsonl")
    p.add_argument("--kind", choices=("form", "layout-qa", "font-style"), default="form")
    p.add_argument("-n", type=int, default=16, help="number of documents")

    p = sub.add_parser("ablate", help="desk-scale ablation of the spatial bias and the image branch")
    common(p, "ablation.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    p.add_argument("--n-test", type=int, default=300)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (ValueError, OSError) as exc:
        print(f"tilt {args.command}: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)

    if args.command in ("pretrain", "finetune"):
        log_path = args.log or str(out) + ".log.jsonl"
        run = cmd_pretrain if args.command == "pretrain" else cmd_finetune
        result = run(cfg, out, log_path)
        plotting.loss_curve(result.history, out.with_suffix(".loss.png"), f"{args.command} loss")
        print(json.dumps({"checkpoint": str(out), "steps": result.steps_run, "final_loss": result.history[-1]["loss"]}))
        return 0

    if args.command == "eval":
        report = cmd_eval(args.checkpoint, args.data or cfg.eval_paths, args.metric or cfg.metric)
        paths = write_eval_report(report, out)
        print(json.dumps({"metric": report.metric, "value": report.value, "files": [str(p) for p in paths]}))
        return 0

    if args.command == "predict":
        rows = cmd_predict(args.checkpoint, args.data or cfg.eval_paths)
        cols = ["doc", "task", "prompt", "pred"]
        if args.out == "-":
            w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
            w.writerow(cols)
            w.writerows([r[c] for c in cols] for r in rows)
        else:
            _write_tsv(rows, out, cols)
        return 0

    if args.command == "synth":
        n = cmd_synth(args.kind, args.n, cfg.seed, out)
        print(json.dumps({"documents": n, "path": str(out)}))
        return 0

    if args.command == "ablate":
        base = cfg if args.config else ablation_config()
        result = cmd_ablate(base, args.seeds, args.n_test)
        paths = write_ablation_report(result, out)
        for row in result["summary"]:
            print(f"{row['task']}\t{row['variant']}\t{100 * row['mean']:.1f} ± {100 * row['spread']:.1f}")
        print(json.dumps({"files": [str(p) for p in paths]}))
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
