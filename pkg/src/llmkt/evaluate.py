"""Experiment harness: pipeline configuration, runs, ablations and sweeps.

An ``Experiment`` owns one dataset, split and sequence encoder and caches
everything that does not depend on the LLM-KT configuration (windows,
ID embeddings, pre-trained base LMs), so a grid of runs shares that work.
Every report carries a fingerprint that determines its run completely.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .data import Dataset, DatasetSplit, HistoryWindow, split_students, window_histories
from .lm import ToyLM
from .metrics import acc, auc
from .model import (LLMKT, KTConfig, TrainResult, build_model, load_model, predict_windows, pretrain_base,
                    train_llm_kt)
from .prompt import Drop, TemplateKind, Vocab, plan_prompt, render_ablated, template_corpus
from .seqkt import IdEmbeddings, SeqConfig, SeqEncoder, evaluate_encoder, extract_id_embeddings, train_seq_encoder

log = logging.getLogger(__name__)

ABLATIONS = ("full", "-Question", "-Concept", "-Sequence", "-Context")
MERGES = ("Add", "Avg", "Concat")
LENGTHS = (20, 50, 100)


# ---------------------------------------------------------------------------
# Configuration and reports
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything a run depends on besides the dataset itself."""

    dtype: str = "float32"
    split_seed: int = 42
    seq: SeqConfig = field(default_factory=SeqConfig)
    kt: KTConfig = field(default_factory=KTConfig)

    def __post_init__(self):
        if np.dtype(self.dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.dtype = np.dtype(self.dtype).name
        if isinstance(self.seq, dict):
            self.seq = SeqConfig(**self.seq)
        if isinstance(self.kt, dict):
            self.kt = KTConfig.from_json(self.kt)

    def to_json(self) -> dict:
        return {"dtype": self.dtype, "split_seed": self.split_seed, "seq": asdict(self.seq), "kt": self.kt.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> PipelineConfig:
        unknown = set(obj) - {"dtype", "split_seed", "seq", "kt"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**obj)

    def with_seed(self, seed: int) -> PipelineConfig:
        """Same config with both training seeds set to ``seed``."""
        return replace(self, seq=replace(self.seq, seed=seed), kt=replace(self.kt, train=replace(self.kt.train, seed=seed)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True, default=list).encode()).hexdigest()[:16]

    def fingerprint(self) -> dict:
        return {**self.kt.fingerprint(), "encoder": self.seq.kind, "dtype": self.dtype,
                "split_seed": self.split_seed, "config_hash": self.digest()}


@dataclass
class MetricsReport:
    auc: float
    acc: float
    n: int
    fingerprint: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.auc <= 1.0 and 0.0 <= self.acc <= 1.0):
            raise ValueError(f"metrics out of range: auc={self.auc}, acc={self.acc}")
        if self.n <= 0:
            raise ValueError("a report needs at least one example")

    @classmethod
    def from_scores(cls, scores: np.ndarray, labels: np.ndarray, fingerprint: dict | None = None) -> MetricsReport:
        labels = np.asarray(labels, dtype=bool)
        return cls(float(auc(scores, labels)), float(acc(scores, labels)), int(len(labels)), dict(fingerprint or {}))

    def to_json(self) -> dict:
        return {"auc": self.auc, "acc": self.acc, "n": self.n, "fingerprint": self.fingerprint}


def majority_acc(labels) -> float:
    """ACC of always predicting the more frequent class."""
    labels = np.asarray(labels, dtype=bool)
    return float(max(labels.mean(), 1.0 - labels.mean()))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, default=list) + "\n")


def write_report(report: MetricsReport, out_dir, stem: str = "metrics") -> None:
    """``<stem>.json`` plus a one-row ``<stem>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"{stem}.json", report.to_json())
    write_table([("run", report)], out / f"{stem}.csv", "run")


def write_table(rows: Sequence[tuple[object, MetricsReport]], path, key: str) -> None:
    """CSV with header ``<key>,auc,acc,n``; floats written with full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, "auc", "acc", "n"])
        for label, r in rows:
            w.writerow([label, repr(r.auc), repr(r.acc), r.n])


def write_rows_json(rows: Sequence[tuple[object, MetricsReport]], path, key: str) -> None:
    write_json(path, [{key: label, **r.to_json()} for label, r in rows])


# ---------------------------------------------------------------------------
# Experiment context
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    model: LLMKT
    train: TrainResult
    report: MetricsReport
    seconds: float


def pretrain_sequences(ds: Dataset, students: Iterable[str], kt: KTConfig, vocab: Vocab) -> list[np.ndarray]:
    """Non-overlapping length-L prompts (answers excluded) ending at each student's last item."""
    seqs = []
    for s in students:
        windows = window_histories(ds.by_student[s], kt.L)
        for i in range(len(windows) - 1, -1, -kt.L):
            seqs.append(plan_prompt(kt.template, windows[i], vocab).token_ids)
    return seqs


class Experiment:
    """Shared state for runs on one dataset under one split and sequence-encoder config."""

    def __init__(self, ds: Dataset, config: PipelineConfig | None = None, split: DatasetSplit | None = None,
                 embeddings: IdEmbeddings | None = None):
        self.ds = ds
        self.config = config or PipelineConfig()
        self.split = split or split_students(ds.students, self.config.split_seed)
        self.vocab = Vocab.build(template_corpus(ds))
        self.encoder: SeqEncoder | None = None
        self._emb = embeddings
        self._windows: dict[tuple[str, int], list[HistoryWindow]] = {}
        self._bases: dict[str, ToyLM] = {}

    @property
    def dtype(self) -> str:
        return self.config.dtype

    def windows(self, part: str, L: int) -> list[HistoryWindow]:
        key = (part, L)
        if key not in self._windows:
            self._windows[key] = window_histories(self.ds.interactions(self.split.part(part)), L)
        return self._windows[key]

    def embeddings(self) -> IdEmbeddings:
        if self._emb is None:
            with nc.default_dtype(self.dtype):
                t = time.perf_counter()
                self.encoder = train_seq_encoder(self.ds, self.split, self.config.seq)
                self._emb = extract_id_embeddings(self.encoder)
            log.info("sequence encoder %s ready in %.1fs", self.config.seq.kind, time.perf_counter() - t)
        return self._emb

    def sequence_test_auc(self) -> float:
        self.embeddings()
        if self.encoder is None:
            raise ValueError("embeddings were supplied, not trained here")
        with nc.default_dtype(self.dtype):
            return evaluate_encoder(self.encoder, self.ds, self.split.test)

    def base_lm(self, kt: KTConfig) -> ToyLM:
        """A fresh copy of the pre-trained base LM for ``kt`` (shared by runs that differ elsewhere)."""
        key = json.dumps({"lm": asdict(kt.lm), "template": kt.template, "L": kt.L, "seed": kt.train.seed,
                          "epochs": kt.train.pretrain_epochs, "lr": kt.train.pretrain_lr}, sort_keys=True)
        if key not in self._bases:
            with nc.default_dtype(self.dtype):
                t = time.perf_counter()
                base = ToyLM(np.random.default_rng(kt.train.seed), len(self.vocab), kt.lm)
                seqs = pretrain_sequences(self.ds, self.split.train, kt, self.vocab)
                pretrain_base(base, seqs, kt.train.pretrain_epochs, kt.train.pretrain_lr, kt.train.seed)
            log.info("base LM pre-trained on %d prompts in %.1fs", len(seqs), time.perf_counter() - t)
            self._bases[key] = base
        return copy.deepcopy(self._bases[key])

    def fingerprint(self, kt: KTConfig) -> dict:
        return replace(self.config, kt=kt).fingerprint()

    def run(self, kt: KTConfig | None = None, part: str = "test") -> RunResult:
        """Train LLM-KT under ``kt`` and report on ``part``."""
        kt = kt or self.config.kt
        emb = self.embeddings()
        base = self.base_lm(kt)
        t = time.perf_counter()
        with nc.default_dtype(self.dtype):
            # token-init embeddings have no pre-training of their own; they learn through the LM loss
            model = build_model(self.ds, self.vocab, emb, kt, base, trainable_sequence=self.config.seq.kind == "token-init")
            result = train_llm_kt(model, self.windows("train", kt.L), self.windows("valid", kt.L))
            windows = self.windows(part, kt.L)
            scores = predict_windows(model, windows)
        report = MetricsReport.from_scores(scores, [w.label for w in windows], self.fingerprint(kt))
        seconds = time.perf_counter() - t
        log.info("run %s: auc %.4f acc %.4f (%.1fs)", kt.fingerprint(), report.auc, report.acc, seconds)
        return RunResult(model, result, report, seconds)


# ---------------------------------------------------------------------------
# Grids, ablations and sweeps
# ---------------------------------------------------------------------------


@dataclass
class ExperimentGrid:
    """Labelled run configurations, executed in order."""

    runs: list[tuple[str, PipelineConfig]]

    def __post_init__(self):
        if not self.runs:
            raise ValueError("an experiment grid needs at least one run")
        labels = [label for label, _ in self.runs]
        if len(set(labels)) != len(labels):
            raise ValueError("run labels must be unique")

    @classmethod
    def ablations(cls, base: PipelineConfig, variants: Sequence[str] = ABLATIONS) -> ExperimentGrid:
        return cls([(v, replace(base, kt=ablation_config(base.kt, v))) for v in variants])

    @classmethod
    def lengths(cls, base: PipelineConfig, Ls: Sequence[int] = LENGTHS) -> ExperimentGrid:
        return cls([(str(L), replace(base, kt=replace(base.kt, L=int(L)))) for L in Ls])

    @classmethod
    def merges(cls, base: PipelineConfig, kinds: Sequence[str] = MERGES) -> ExperimentGrid:
        return cls([(k, replace(base, kt=replace(base.kt, merge=k))) for k in kinds])

    @classmethod
    def encoders(cls, base: PipelineConfig, kinds: Sequence[str] = ("dkt", "akt-lite", "token-init")) -> ExperimentGrid:
        return cls([(k, replace(base, seq=replace(base.seq, kind=k))) for k in kinds])


def ablation_config(kt: KTConfig, variant: str) -> KTConfig:
    if variant == "full":
        return kt
    if variant == "-Question":
        return replace(kt, drop=tuple(sorted(set(kt.drop) | {Drop.QUESTION.value})))
    if variant == "-Concept":
        return replace(kt, drop=tuple(sorted(set(kt.drop) | {Drop.CONCEPT.value})))
    if variant == "-Sequence":
        return replace(kt, use_sequence=False)
    if variant == "-Context":
        return replace(kt, use_context=False)
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


def variant_problem(ds: Dataset, kt: KTConfig) -> str | None:
    """Why ``kt`` cannot run on ``ds`` (None when it can)."""
    has_text = ds.has_question_text or ds.has_concept_text
    has_ids = ds.has_question_ids or ds.has_concept_ids
    if not kt.use_context and not has_text:
        return "dataset has no question or concept text, so there is no context branch to remove"
    if not kt.use_sequence and not has_ids:
        return "dataset has no question or concept ids, so there is no sequence branch to remove"
    if (not kt.use_context and not has_ids) or (not kt.use_sequence and not has_text):
        return "removing the branch leaves the slots without any information"
    if Drop.QUESTION.value in kt.drop and not (ds.has_question_ids or ds.has_question_text):
        return "dataset has no question information to remove"
    if Drop.CONCEPT.value in kt.drop and not (ds.has_concept_ids or ds.has_concept_text):
        return "dataset has no concept information to remove"
    sample = window_histories(ds.interactions(ds.students[:1]), kt.L)
    if sample:
        try:
            render_ablated(kt.template, sample[0], kt.drop)
        except (ValueError, KeyError) as exc:
            return str(exc)
    return None


def experiment_key(cfg: PipelineConfig) -> str:
    """Runs whose configs share this key can share one :class:`Experiment`."""
    return json.dumps({"seq": asdict(cfg.seq), "split": cfg.split_seed, "dtype": cfg.dtype}, sort_keys=True)


def run_grid(ds: Dataset, grid: ExperimentGrid, part: str = "test",
             experiments: dict | None = None) -> list[tuple[str, MetricsReport]]:
    """Run every config in order; experiments sharing split/encoder/dtype share cached state.

    Runs that cannot apply to ``ds`` are skipped with a logged notice.
    """
    experiments = {} if experiments is None else experiments
    rows = []
    for label, cfg in grid.runs:
        problem = variant_problem(ds, cfg.kt)
        if problem:
            log.warning("skipping %s: %s", label, problem)
            continue
        key = experiment_key(cfg)
        if key not in experiments:
            experiments[key] = Experiment(ds, cfg)
        rows.append((label, experiments[key].run(cfg.kt, part).report))
    return rows


def run_ablation(ds: Dataset, base: PipelineConfig | None = None, **kw) -> list[tuple[str, MetricsReport]]:
    return run_grid(ds, ExperimentGrid.ablations(base or PipelineConfig()), **kw)


def run_length_sweep(ds: Dataset, base: PipelineConfig | None = None, Ls: Sequence[int] = LENGTHS,
                     **kw) -> list[tuple[str, MetricsReport]]:
    return run_grid(ds, ExperimentGrid.lengths(base or PipelineConfig(), Ls), **kw)


def run_merge_sweep(ds: Dataset, base: PipelineConfig | None = None, kinds: Sequence[str] = MERGES,
                    **kw) -> list[tuple[str, MetricsReport]]:
    return run_grid(ds, ExperimentGrid.merges(base or PipelineConfig(), kinds), **kw)


# ---------------------------------------------------------------------------
# Checkpoint evaluation
# ---------------------------------------------------------------------------


def evaluate(checkpoint, ds: Dataset, split: DatasetSplit, part: str = "test", template=None,
             L: int | None = None) -> MetricsReport:
    """Score a saved model on one split part; template and L default to the checkpoint's."""
    ckpt = Path(checkpoint)
    manifest_path = ckpt / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    data_hash = Vocab.build(template_corpus(ds)).hash()
    if manifest["vocab_hash"] != data_hash:
        raise ValueError(f"vocabulary hash mismatch: checkpoint {manifest['vocab_hash'][:12]} vs data {data_hash[:12]}")
    model = load_model(ckpt, ds)
    kt = model.config
    if template is not None:
        kt = replace(kt, template=int(TemplateKind.parse(template)))
    if L is not None:
        kt = replace(kt, L=int(L))
    model.config = kt
    windows = window_histories(ds.interactions(split.part(part)), kt.L)
    if not windows:
        raise ValueError(f"split part {part!r} has no windows")
    with nc.default_dtype(manifest["dtype"]):
        scores = predict_windows(model, windows)
    fp = {**manifest.get("fingerprint", {}), **kt.fingerprint(), "dtype": manifest["dtype"]}
    return MetricsReport.from_scores(scores, [w.label for w in windows], fp)
