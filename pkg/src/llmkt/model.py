"""The assembled knowledge-tracing model: frozen LM + LoRA + plug-in context and sequence.

``train_llm_kt`` fits LoRA factors, adapters, the merge projection and
(unless frozen) the context encoder with cross-entropy on the answer token.
Windows of one student share their history prefix, so they are evaluated
together (``prompt.pack_windows``); the result equals running each window's
prompt on its own.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .context import ContextConfig, ContextEncoder, encode_texts
from .data import Dataset, HistoryWindow
from .fusion import EntityFeatures, Fusion, MergeKind
from .lm import LMConfig, LoRAConfig, PackedInputs, ToyLM, packed_answer_logits, yes_probability
from .metrics import auc
from .numcore import Module, Tensor, parameter
from .prompt import Drop, PackedPlan, TemplateKind, Vocab, pack_windows
from .seqkt import IdEmbeddings

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    grad_accum: int = 1
    lr: float = 3e-3
    weight_decay: float = 1e-5
    patience: int = 3
    pretrain_epochs: int = 1
    pretrain_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.epochs <= 10:
            raise ValueError("epochs must be in [1, 10]")
        if self.batch_size < 1 or self.grad_accum < 1 or self.patience < 1 or self.pretrain_epochs < 0:
            raise ValueError("batch_size, grad_accum and patience must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")


@dataclass
class KTConfig:
    """Everything that defines one LLM-KT run (its fingerprint)."""

    template: int = 1
    L: int = 100
    merge: str = "Add"
    drop: tuple[str, ...] = ()
    use_context: bool = True
    use_sequence: bool = True
    lm: LMConfig = field(default_factory=LMConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.template = int(TemplateKind.parse(self.template))
        self.merge = MergeKind.parse(self.merge).value
        self.drop = tuple(Drop(d).value for d in self.drop)
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if not (self.use_context or self.use_sequence):
            raise ValueError("at least one of context and sequence must be used")
        for name, cls in (("lm", LMConfig), ("lora", LoRAConfig), ("context", ContextConfig), ("train", TrainConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> KTConfig:
        return cls(**obj)

    def fingerprint(self) -> dict:
        return {"template": self.template, "merge": self.merge, "L": self.L, "seed": self.train.seed,
                "drop": list(self.drop), "use_context": self.use_context, "use_sequence": self.use_sequence}


class LLMKT(Module):
    """Parameter container; ``features`` and ``vocab`` are fixed lookups, not parameters."""

    def __init__(self, lm: ToyLM, context: ContextEncoder | None, fusion: Fusion, seq_table: Tensor,
                 features: EntityFeatures, vocab: Vocab, config: KTConfig):
        self.lm = lm
        self.context = context
        self.fusion = fusion
        self.seq_table = seq_table
        self.features = features
        self.vocab = vocab
        self.config = config
        self.seq_ids: tuple[list[int], list[int]] = ([], [])

    def fused_table(self) -> Tensor:
        """Injected vector for every slot key (recomputed because adapters change)."""
        cfg = self.config
        text_vectors = None
        if self.context is not None and cfg.use_context and self.features.texts:
            text_vectors = encode_texts(self.context, self.features.texts, self.vocab)
        seq = self.seq_table if cfg.use_sequence and len(self.seq_table.data) else None
        return self.fusion.table(self.features, text_vectors, seq, cfg.use_context, cfg.use_sequence)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def frozen_checksums(self) -> dict[str, str]:
        import hashlib

        return {n: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
                for n, p in self.named_parameters() if not p.requires_grad}


def seq_table_from(emb: IdEmbeddings) -> np.ndarray:
    return np.concatenate([emb.questions, emb.concepts], axis=0)


def build_model(ds: Dataset, vocab: Vocab, emb: IdEmbeddings, config: KTConfig, base_lm: ToyLM,
                trainable_sequence: bool = False) -> LLMKT:
    """Attach LoRA to ``base_lm`` (frozen) and create fresh plug-in modules."""
    rng = np.random.default_rng(config.train.seed)
    lm = base_lm
    lm.attach_lora(rng, config.lora)
    context = None
    if ds.has_question_text or ds.has_concept_text:
        context = ContextEncoder(rng, len(vocab), config.context)
        if config.context.frozen:
            context.freeze()
    fusion = Fusion(rng, config.context.dim, emb.dim, lm.dim, config.merge)
    features = EntityFeatures.from_dataset(ds, emb.question_ids, emb.concept_ids)
    seq = parameter(seq_table_from(emb)) if trainable_sequence else Tensor(seq_table_from(emb))
    model = LLMKT(lm, context, fusion, seq, features, vocab, config)
    model.seq_ids = (list(emb.question_ids), list(emb.concept_ids))
    return model


# ---------------------------------------------------------------------------
# Units: packed plans resolved to feature rows and labels
# ---------------------------------------------------------------------------


@dataclass
class Unit:
    inputs: PackedInputs
    stream_rows: np.ndarray  # feature row per stream slot
    branch_rows: np.ndarray  # feature row per branch slot (in branch order)
    labels: np.ndarray  # (K,) bool
    window_index: np.ndarray  # (K,) positions in the caller's window list

    @property
    def n_tokens(self) -> int:
        return len(self.inputs.stream_ids) + int(self.inputs.lengths.sum())


def _resolve(plan: PackedPlan, history, targets, features: EntityFeatures, pad_id: int):
    stream_rows = [features.row(b.slot, history[b.ref]) for b in plan.stream_bindings]
    branch_rows = []
    for br, target in zip(plan.branches, targets):
        branch_rows.extend(features.row(b.slot, target) for b in br.slot_bindings)
    return (PackedInputs.from_plan(plan, pad_id), np.array(stream_rows, dtype=np.int64),
            np.array(branch_rows, dtype=np.int64))


def make_units(model: LLMKT, windows: Sequence[HistoryWindow], chunk: int | None = None) -> list[Unit]:
    """Pack windows per shared history and split each pack into chunks of about ``chunk`` targets."""
    cfg = model.config
    units = []
    for plan, members in pack_windows(cfg.template, windows, model.vocab, cfg.drop):
        history = max((windows[i].history for i in members), key=len)
        K = len(members)
        n_chunks = 1 if chunk is None else max(1, int(round(K / chunk)))
        for part in np.array_split(np.arange(K), n_chunks):
            sub = plan.subset(part)
            idx = [members[i] for i in part]
            targets = [windows[i].target for i in idx]
            inputs, srows, brows = _resolve(sub, history, targets, model.features, model.vocab.pad_id)
            labels = np.array([t.correct for t in targets], dtype=bool)
            units.append(Unit(inputs, srows, brows, labels, np.array(idx, dtype=np.int64)))
    return units


def unit_logits(model: LLMKT, unit: Unit, fused: Tensor) -> Tensor:
    ss = nc.take_rows(fused, unit.stream_rows) if len(unit.stream_rows) else None
    bs = nc.take_rows(fused, unit.branch_rows) if len(unit.branch_rows) else None
    return packed_answer_logits(model.lm, unit.inputs, ss, bs)


def unit_loss(model: LLMKT, unit: Unit, fused: Tensor) -> Tensor:
    gold = np.where(unit.labels, model.vocab.yes_id, model.vocab.no_id)
    return nc.cross_entropy(unit_logits(model, unit, fused), gold)


def predict_windows(model: LLMKT, windows: Sequence[HistoryWindow], chunk: int = 48) -> np.ndarray:
    """p(Yes) for each window, in order."""
    if not windows:
        raise ValueError("no windows to score")
    model.eval()
    scores = np.full(len(windows), np.nan)
    yes, no = model.vocab.yes_id, model.vocab.no_id
    with nc.no_grad():
        fused = model.fused_table()
        for unit in make_units(model, windows, chunk):
            z = unit_logits(model, unit, fused).data
            scores[unit.window_index] = yes_probability(z[:, yes], z[:, no])
    return scores


# ---------------------------------------------------------------------------
# Base LM pre-training and LLM-KT training
# ---------------------------------------------------------------------------


def pretrain_base(lm: ToyLM, sequences: Sequence[np.ndarray], epochs: int, lr: float, seed: int,
                  weight_decay: float = 1e-5) -> list[float]:
    """Next-token language modelling on rendered template text (no answers)."""
    if epochs == 0 or not sequences:
        return []
    rng = np.random.default_rng(seed)
    opt = nc.AdamW(lm.trainable(), lr=lr, weight_decay=weight_decay)
    total = epochs * len(sequences)
    step, losses = 0, []
    lm.train()
    for _ in range(epochs):
        running = 0.0
        for i in rng.permutation(len(sequences)):
            ids = sequences[i]
            opt.zero_grad()
            loss = nc.cross_entropy(lm.logits_all(lm.embed(ids[:-1])), ids[1:])
            loss.backward()
            opt.step(nc.cosine_lr(step, total, lr))
            step += 1
            running += loss.item()
        losses.append(running / len(sequences))
        log.info("base LM pre-training loss %.4f", losses[-1])
    return losses


@dataclass
class TrainResult:
    curves: list[dict]
    best_epoch: int
    best_valid_auc: float
    frozen_before: dict[str, str]
    frozen_after: dict[str, str]


def train_llm_kt(model: LLMKT, train_windows: Sequence[HistoryWindow],
                 valid_windows: Sequence[HistoryWindow]) -> TrainResult:
    """Fit the trainable set on the answer-token loss with cosine decay and early stopping."""
    cfg = model.config.train
    if not train_windows:
        raise ValueError("no training windows")
    if not valid_windows:
        raise ValueError("no validation windows")
    frozen_before = model.frozen_checksums()
    params = model.trainable()
    names = model.trainable_names()
    opt = nc.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    units = make_units(model, train_windows, cfg.batch_size)
    steps_per_epoch = int(np.ceil(len(units) / cfg.grad_accum))
    total = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed + 7)
    model.lm.set_dropout_rng(np.random.default_rng(cfg.seed + 11))
    valid_labels = np.array([w.label for w in valid_windows])
    best = (-np.inf, 0, {n: p.data.copy() for n, p in zip(names, params)})
    curves, bad, step = [], 0, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(units))
        running, n_seen = 0.0, 0
        for start in range(0, len(order), cfg.grad_accum):
            group = order[start : start + cfg.grad_accum]
            opt.zero_grad()
            for u in group:
                fused = model.fused_table()
                loss = unit_loss(model, units[u], fused) * (1.0 / len(group))
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(f"non-finite loss {value} at epoch {epoch}, step {step}; "
                                             f"unit of {len(units[u].labels)} windows")
                loss.backward()
                running += value * len(group) * len(units[u].labels)
                n_seen += len(units[u].labels)
            opt.step(nc.cosine_lr(step, total, cfg.lr))
            step += 1
        valid_auc = auc(predict_windows(model, valid_windows), valid_labels)
        curves.append({"epoch": epoch, "train_loss": running / n_seen, "valid_auc": valid_auc})
        log.info("epoch %d train loss %.4f valid auc %.4f", epoch, running / n_seen, valid_auc)
        if valid_auc > best[0]:
            best = (valid_auc, epoch, {n: p.data.copy() for n, p in zip(names, params)})
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for n, p in zip(names, params):
        p.data = best[2][n]
    model.lm.set_dropout_rng(None)
    model.eval()
    return TrainResult(curves, best[1], float(best[0]), frozen_before, model.frozen_checksums())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_curves(curves: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_auc"])
        for row in curves:
            w.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["valid_auc"]))])


def save_model(model: LLMKT, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    manifest = {
        "architecture": {"lm": asdict(cfg.lm), "context": asdict(cfg.context), "vocab_size": len(model.vocab),
                         "d_seq": int(model.seq_table.shape[1]), "merge": cfg.merge,
                         "has_context_encoder": model.context is not None,
                         "trainable_sequence": bool(model.seq_table.requires_grad)},
        "lora": asdict(cfg.lora),
        "vocab_hash": model.vocab.hash(),
        "seed": cfg.train.seed,
        "config": cfg.to_json(),
        "seq_question_ids": [int(i) for i in model.seq_ids[0]],
        "seq_concept_ids": [int(i) for i in model.seq_ids[1]],
        "dtype": np.dtype(model.lm.tok_emb.dtype).name,
    }
    manifest.update(extra or {})
    nc.save_tensors(out / "model.npz", model.state_dict(), {"manifest": "manifest.json"})
    model.vocab.save(out / "vocab.json")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=list))
    return out


def load_model(ckpt_dir, ds: Dataset) -> LLMKT:
    """Rebuild a saved model; ``ds`` supplies the slot-key lookup."""
    ckpt = Path(ckpt_dir)
    for name in ("model.npz", "manifest.json", "vocab.json"):
        if not (ckpt / name).exists():
            raise FileNotFoundError(f"checkpoint is missing {ckpt / name}")
    manifest = json.loads((ckpt / "manifest.json").read_text())
    vocab = Vocab.load(ckpt / "vocab.json")
    if vocab.hash() != manifest["vocab_hash"]:
        raise ValueError("vocabulary file does not match the checkpoint manifest")
    tensors, _ = nc.load_tensors(ckpt / "model.npz")
    cfg = KTConfig.from_json(manifest["config"])
    arch = manifest["architecture"]
    seq = tensors["seq_table"]
    qids, cids = manifest["seq_question_ids"], manifest["seq_concept_ids"]
    emb = IdEmbeddings(list(qids), seq[: len(qids)], list(cids), seq[len(qids) :])
    with nc.default_dtype(manifest["dtype"]):
        base = ToyLM(np.random.default_rng(0), arch["vocab_size"], LMConfig(**arch["lm"]))
        model = build_model(ds, vocab, emb, cfg, base, trainable_sequence=arch["trainable_sequence"])
    if (model.context is not None) != arch["has_context_encoder"]:
        raise ValueError("dataset text availability differs from the checkpoint")
    model.load_state_dict(tensors)
    model.eval()
    return model
