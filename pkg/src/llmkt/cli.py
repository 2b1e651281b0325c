"""Command-line interface: ``llmkt <subcommand> [--config C] [--seed S] [--out DIR]``.

Exit codes: 0 success, 1 user error (bad arguments, config or inputs,
missing artifacts), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import numcore as nc
from .data import CsvFormatError, Dataset, DatasetSplit, SynthSpec, load_csv, save_synth, split_students, synth_generate
from .evaluate import (Experiment, MetricsReport, PipelineConfig, evaluate, run_ablation, run_length_sweep,
                       run_merge_sweep, write_json, write_report, write_rows_json, write_table)
from .model import save_curves, save_model
from .seqkt import load_embeddings, save_embeddings, save_encoder, student_scores

log = logging.getLogger("llmkt")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2
CONFIG_KEYS = {"dtype", "split_seed", "seq", "kt", "synth", "data"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Config and data loading
# ---------------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ValueError(f"config {p} must hold a JSON object")
    unknown = set(obj) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(CONFIG_KEYS)}")
    return obj


def pipeline_config(raw: dict, seed: int | None) -> PipelineConfig:
    cfg = PipelineConfig.from_json({k: v for k, v in raw.items() if k in {"dtype", "split_seed", "seq", "kt"}})
    return cfg.with_seed(seed) if seed is not None else cfg


def synth_spec(raw: dict, seed: int | None) -> SynthSpec:
    obj = dict(raw.get("synth", {}))
    known = {f.name for f in fields(SynthSpec)}
    if set(obj) - known:
        raise ValueError(f"unknown synth keys {sorted(set(obj) - known)}")
    if seed is not None:
        obj["seed"] = seed
    return SynthSpec(**obj)


def resolve_csv(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "interactions.csv"
    if not p.exists():
        raise FileNotFoundError(f"interaction data not found: {p}")
    return p


def load_data(args, raw: dict) -> Dataset:
    data = raw.get("data", {})
    path = args.data or data.get("path")
    if path is None:
        raise UsageError("no dataset given: pass --data <csv or directory> or set data.path in the config")
    schema = args.schema or data.get("schema", "native")
    return Dataset.from_interactions(load_csv(resolve_csv(path), schema))


def load_split(args, ds: Dataset, cfg: PipelineConfig) -> DatasetSplit | None:
    if args.split is None:
        return None
    p = Path(args.split)
    if p.is_dir():
        p = p / "split.json"
    if not p.exists():
        raise FileNotFoundError(f"split file not found: {p}")
    split = DatasetSplit.load(p)
    missing = set(split.train + split.valid + split.test) - set(ds.students)
    if missing:
        raise ValueError(f"split names {len(missing)} students absent from the data")
    return split


def out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, raw):
    spec = synth_spec(raw, args.seed)
    result = synth_generate(spec)
    out = out_dir(args)
    save_synth(result, out)
    print(f"wrote {len(result.interactions)} interactions for {spec.n_students} students to {out}")


def cmd_prepare(args, raw):
    ds = load_data(args, raw)
    cfg = pipeline_config(raw, args.seed)
    exp = Experiment(ds, cfg, load_split(args, ds, cfg))
    out = out_dir(args)
    exp.split.save(out / "split.json")
    L = cfg.kt.L
    summary = {"students": len(ds.students), "interactions": len(ds.interactions()), "L": L,
               "parts": {p: {"students": len(exp.split.part(p)), "windows": len(exp.windows(p, L))}
                         for p in ("train", "valid", "test")},
               "has_question_ids": ds.has_question_ids, "has_concept_ids": ds.has_concept_ids,
               "has_question_text": ds.has_question_text, "has_concept_text": ds.has_concept_text,
               "vocab_size": len(exp.vocab), "vocab_hash": exp.vocab.hash()}
    write_json(out / "summary.json", summary)
    exp.vocab.save(out / "vocab.json")
    print(json.dumps(summary["parts"]))


def cmd_train_seq(args, raw):
    ds = load_data(args, raw)
    cfg = pipeline_config(raw, args.seed)
    exp = Experiment(ds, cfg, load_split(args, ds, cfg))
    out = out_dir(args)
    emb = exp.embeddings()
    save_embeddings(emb, out / "embeddings.json")
    save_embeddings(emb, out / "embeddings.csv")
    save_encoder(exp.encoder, out / "encoder.npz")
    exp.split.save(out / "split.json")
    if cfg.seq.kind != "token-init":
        with nc.default_dtype(cfg.dtype):
            scores, labels = student_scores(exp.encoder, ds, exp.split.test)
        report = MetricsReport.from_scores(scores, labels, {"encoder": cfg.seq.kind, "seed": cfg.seq.seed,
                                                            "split_seed": cfg.split_seed, "dtype": cfg.dtype})
        write_report(report, out)
        print(f"{cfg.seq.kind} test auc {report.auc:.4f} acc {report.acc:.4f} n {report.n}")


def cmd_train(args, raw):
    t0 = time.perf_counter()
    ds = load_data(args, raw)
    cfg = pipeline_config(raw, args.seed)
    emb = None
    if args.embeddings:
        p = Path(args.embeddings)
        if p.is_dir():
            p = p / "embeddings.json"
        if not p.exists():
            raise FileNotFoundError(f"embedding file not found: {p}")
        emb = load_embeddings(p)
    exp = Experiment(ds, cfg, load_split(args, ds, cfg), embeddings=emb)
    out = out_dir(args)
    run = exp.run(cfg.kt, "test")
    save_model(run.model, out / "checkpoint", {"fingerprint": run.report.fingerprint})
    save_curves(run.train.curves, out / "curves.csv")
    exp.split.save(out / "split.json")
    write_json(out / "config.json", cfg.to_json())
    write_report(run.report, out)
    write_json(out / "frozen_checksums.json", {"before": run.train.frozen_before, "after": run.train.frozen_after})
    print(f"test auc {run.report.auc:.4f} acc {run.report.acc:.4f} n {run.report.n} "
          f"({time.perf_counter() - t0:.0f}s)")


def cmd_eval(args, raw):
    if args.checkpoint is None:
        raise FileNotFoundError("missing artifact: no checkpoint given (pass --checkpoint <dir>/checkpoint)")
    ckpt = Path(args.checkpoint)
    if (ckpt / "checkpoint" / "manifest.json").exists():
        ckpt = ckpt / "checkpoint"
    for name in ("manifest.json", "model.npz", "vocab.json"):
        if not (ckpt / name).exists():
            raise FileNotFoundError(f"missing artifact: {ckpt / name}")
    ds = load_data(args, raw)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    cfg = pipeline_config({**raw, "kt": manifest["config"]}, None)
    split = load_split(args, ds, cfg)
    if split is None:
        split = split_students(ds.students, cfg.split_seed)
    report = evaluate(ckpt, ds, split, args.part, args.template, args.L)
    write_report(report, out_dir(args))
    print(f"{args.part} auc {report.auc:.4f} acc {report.acc:.4f} n {report.n}")


def _table(args, rows, key, stem):
    out = out_dir(args)
    write_table(rows, out / f"{stem}.csv", key)
    write_rows_json(rows, out / f"{stem}.json", key)
    for label, r in rows:
        print(f"{label}\tauc {r.auc:.4f}\tacc {r.acc:.4f}\tn {r.n}")


def cmd_ablate(args, raw):
    ds = load_data(args, raw)
    rows = run_ablation(ds, pipeline_config(raw, args.seed))
    _table(args, rows, "variant", "ablation")


def cmd_sweep_length(args, raw):
    ds = load_data(args, raw)
    rows = run_length_sweep(ds, pipeline_config(raw, args.seed), args.Ls)
    _table(args, rows, "L", "length_sweep")


def cmd_sweep_merge(args, raw):
    ds = load_data(args, raw)
    rows = run_merge_sweep(ds, pipeline_config(raw, args.seed))
    _table(args, rows, "merge", "merge_sweep")


COMMANDS = {
    "synth": (cmd_synth, "generate the oracle synthetic dataset"),
    "prepare": (cmd_prepare, "load, split and window a dataset"),
    "train-seq": (cmd_train_seq, "train the sequence encoder and export ID embeddings"),
    "train": (cmd_train, "train LLM-KT and save a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint on a split"),
    "ablate": (cmd_ablate, "full model and the four ablations"),
    "sweep-length": (cmd_sweep_length, "history length sweep"),
    "sweep-merge": (cmd_sweep_merge, "merge function sweep (Add/Avg/Concat)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="llmkt", description="Knowledge tracing with a small LM plus plug-in context and sequence.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file (see docs/config.md)")
        p.add_argument("--seed", type=int, help="synthetic-data seed for synth, training seed otherwise")
        p.add_argument("--out", required=True, help="output directory")
        if name == "synth":
            continue
        p.add_argument("--data", help="interaction CSV or a directory holding interactions.csv")
        p.add_argument("--schema", choices=["native", "assist-like", "junyi-like", "nips-like"])
        p.add_argument("--split", help="split.json (or a directory holding one) instead of a fresh split")
        if name == "train":
            p.add_argument("--embeddings", help="precomputed ID embeddings (JSON/CSV or train-seq output dir)")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint directory written by train")
            p.add_argument("--part", default="test", choices=["train", "valid", "test"])
            p.add_argument("--template", type=int, choices=[1, 2, 3, 4, 5])
            p.add_argument("--L", type=int)
        if name == "sweep-length":
            p.add_argument("--Ls", type=int, nargs="+", default=[20, 50, 100])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        raw = load_config(args.config)
        COMMANDS[args.command][0](args, raw)
    except UsageError as exc:
        print(f"llmkt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, CsvFormatError, ValueError, KeyError, TypeError) as exc:
        print(f"llmkt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"llmkt {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
