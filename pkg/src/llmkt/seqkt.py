"""Classical sequence encoders (DKT, AKT-lite) and the ID embeddings they learn.

Both models read a student's interactions as dense entity indices and predict
the correctness of every step from the steps before it. They are trained on
their own, then frozen and used as a source of question/concept embeddings.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import numcore as nc
from .data import Dataset, DatasetSplit, Interaction
from .metrics import auc
from .numcore import Linear, Module, Tensor, parameter
from .numcore.module import xavier_init

log = logging.getLogger(__name__)

ENCODER_KINDS = ("dkt", "akt-lite", "token-init")


def parse_kind(kind: str) -> str:
    k = kind.strip().lower().replace("_", "-")
    aliases = {"akt": "akt-lite", "aktlite": "akt-lite", "tokenid": "token-init", "token": "token-init"}
    k = aliases.get(k, k)
    if k not in ENCODER_KINDS:
        raise ValueError(f"unknown sequence encoder {kind!r}; expected one of {ENCODER_KINDS}")
    return k


@dataclass
class SeqConfig:
    kind: str = "akt-lite"
    dim: int = 64  # d^s
    hidden: int = 64
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-5
    patience: int = 5
    aux_weight: float = 0.5
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.kind = parse_kind(self.kind)
        if self.dim <= 0 or self.hidden <= 0:
            raise ValueError("dim and hidden must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class EntityIndex:
    """Dense row numbers for raw question/concept ids."""

    question_ids: list[int]
    concept_ids: list[int]

    @classmethod
    def from_dataset(cls, ds: Dataset) -> EntityIndex:
        return cls(list(ds.question_ids), list(ds.concept_ids))

    @property
    def has_questions(self) -> bool:
        return bool(self.question_ids)

    @property
    def has_concepts(self) -> bool:
        return bool(self.concept_ids)

    @property
    def n_questions(self) -> int:
        return max(1, len(self.question_ids))

    @property
    def n_concepts(self) -> int:
        return max(1, len(self.concept_ids))

    def q_rows(self, ids: Sequence[int]) -> np.ndarray:
        index = {q: i for i, q in enumerate(self.question_ids)}
        return np.array([index[q] for q in ids], dtype=np.int64)

    def c_rows(self, ids: Sequence[int]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.concept_ids)}
        return np.array([index[c] for c in ids], dtype=np.int64)


@dataclass
class SeqBatch:
    q: np.ndarray  # (B, T) question rows (0 where unavailable)
    c: np.ndarray  # (B, T) first-concept rows
    a: np.ndarray  # (B, T) 0/1 correctness
    mask: np.ndarray  # (B, T) True for real steps

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape


def make_batch(sequences: Sequence[Sequence[Interaction]], index: EntityIndex) -> SeqBatch:
    if not sequences:
        raise ValueError("empty batch")
    qmap = {q: i for i, q in enumerate(index.question_ids)}
    cmap = {c: i for i, c in enumerate(index.concept_ids)}
    B, T = len(sequences), max(len(s) for s in sequences)
    q = np.zeros((B, T), dtype=np.int64)
    c = np.zeros((B, T), dtype=np.int64)
    a = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, seq in enumerate(sequences):
        for t, it in enumerate(seq):
            try:
                if index.has_questions:
                    q[b, t] = qmap[it.question_id]
                if index.has_concepts:
                    c[b, t] = cmap[it.concept_ids[0]]
            except (KeyError, IndexError):
                raise ValueError(f"interaction {it.student_id}/{it.seq_index} has an id outside the "
                                 "encoder's entity tables") from None
            a[b, t] = int(it.correct)
            mask[b, t] = True
    return SeqBatch(q, c, a, mask)


def _check_rows(rows: np.ndarray, n: int, what: str) -> None:
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise ValueError(f"{what} index out of range [0, {n})")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class LSTMCell(Module):
    """Single LSTM cell; gate order (input, forget, candidate, output)."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int):
        self.w_ih = parameter(xavier_init(rng, in_dim, 4 * hidden))
        self.w_hh = parameter(xavier_init(rng, hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget gate starts open
        self.bias = parameter(b)
        self.hidden = hidden

    def __call__(self, xw: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """``xw`` is the input already multiplied by ``w_ih``."""
        n = self.hidden
        gates = xw + h @ self.w_hh + self.bias
        i = nc.sigmoid(gates[..., :n])
        f = nc.sigmoid(gates[..., n : 2 * n])
        g = nc.tanh(gates[..., 2 * n : 3 * n])
        o = nc.sigmoid(gates[..., 3 * n :])
        c = f * c + i * g
        return o * nc.tanh(c), c


class DKT(Module):
    """Recurrent tracer over one-hot (entity, correctness) inputs.

    The one-hot input of width ``2 * n`` times the input projection is an
    embedding lookup, so ``w_q`` holds one row per (question, correctness)
    pair: row ``q`` for a wrong answer and ``q + n_questions`` for a right one.
    """

    kind = "dkt"

    def __init__(self, rng: np.random.Generator, index: EntityIndex, dim: int, hidden: int, init_std: float = 0.1):
        self.use_q, self.use_c = index.has_questions, index.has_concepts
        self.n_q, self.n_c = index.n_questions, index.n_concepts
        self.w_q = parameter(rng.normal(0.0, init_std, size=(2 * self.n_q, dim)))
        self.w_c = parameter(rng.normal(0.0, init_std, size=(2 * self.n_c, dim)))
        self.cell = LSTMCell(rng, dim, hidden)
        self.head_q = Linear(rng, hidden, self.n_q)
        self.head_c = Linear(rng, hidden, self.n_c)
        self.hidden = hidden

    def inputs(self, batch: SeqBatch) -> Tensor:
        _check_rows(batch.q, self.n_q, "question")
        _check_rows(batch.c, self.n_c, "concept")
        x = None
        if self.use_q:
            x = nc.take_rows(self.w_q, batch.q + batch.a * self.n_q)
        if self.use_c:
            xc = nc.take_rows(self.w_c, batch.c + batch.a * self.n_c)
            x = xc if x is None else x + xc
        return x

    def states(self, batch: SeqBatch) -> Tensor:
        """Hidden state *before* each step: (B, T, hidden), zeros at t=0."""
        B, T = batch.shape
        xw = self.inputs(batch) @ self.cell.w_ih
        h = Tensor(np.zeros((B, self.hidden)))
        c = Tensor(np.zeros((B, self.hidden)))
        out = [h]
        for t in range(T - 1):
            h, c = self.cell(xw[:, t], h, c)
            out.append(h)
        return nc.stack(out, axis=1)

    def logits(self, batch: SeqBatch) -> tuple[Tensor, Tensor | None]:
        """Main logit per step and the auxiliary concept logit (None if unused)."""
        H = self.states(batch)
        B, T = batch.shape
        bi, ti = np.arange(B)[:, None], np.arange(T)[None, :]
        if self.use_q:
            main = self.head_q(H)[bi, ti, batch.q]
            aux = self.head_c(H)[bi, ti, batch.c] if self.use_c else None
            return main, aux
        return self.head_c(H)[bi, ti, batch.c], None

    def question_vectors(self) -> np.ndarray:
        w = self.w_q.data
        return 0.5 * (w[: self.n_q] + w[self.n_q :])

    def concept_vectors(self) -> np.ndarray:
        w = self.w_c.data
        return 0.5 * (w[: self.n_c] + w[self.n_c :])


class MonotonicAttention(Module):
    """Single-head attention whose scores decay linearly with temporal distance.

    weight(t, i) is proportional to exp(q_t . k_i / sqrt(d) - theta * (t - i))
    over earlier steps i < t, with theta = softplus(theta_raw) >= 0.
    """

    def __init__(self, rng: np.random.Generator, dim: int, theta: float = 0.1):
        self.w_query = Linear(rng, dim, dim, bias=False)
        self.w_key = Linear(rng, dim, dim, bias=False)
        self.w_value = Linear(rng, dim, dim, bias=False)
        self.theta_raw = parameter(np.array(np.log(np.expm1(theta))))
        self.dim = dim

    @property
    def theta(self) -> float:
        return float(np.logaddexp(0.0, self.theta_raw.data))

    def weights(self, queries: Tensor, keys: Tensor, mask: np.ndarray) -> Tensor:
        T = queries.shape[-2]
        q, k = self.w_query(queries), self.w_key(keys)
        dist = (np.arange(T)[:, None] - np.arange(T)[None, :]).astype(q.data.dtype)
        scores = (q @ nc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.dim)) - nc.softplus(self.theta_raw) * Tensor(dist)
        return nc.softmax(scores, axis=-1, mask=mask)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray) -> Tensor:
        """Rows with no visible history come out as zeros."""
        return self.weights(queries, keys, mask) @ self.w_value(values)


def history_mask(valid: np.ndarray, window: int | None = None) -> np.ndarray:
    """(B, T, T) mask: target t sees real steps i with t - window <= i < t."""
    T = valid.shape[1]
    t = np.arange(T)[:, None]
    i = np.arange(T)[None, :]
    allowed = i < t
    if window is not None:
        allowed &= i >= t - window
    return allowed[None, :, :] & valid[:, None, :]


class AKTLite(Module):
    """Embedding tables plus monotonic attention over the student's past."""

    kind = "akt-lite"

    def __init__(self, rng: np.random.Generator, index: EntityIndex, dim: int, hidden: int, init_std: float = 0.1):
        self.use_q, self.use_c = index.has_questions, index.has_concepts
        self.n_q, self.n_c = index.n_questions, index.n_concepts
        self.emb_q = parameter(rng.normal(0.0, init_std, size=(self.n_q, dim)))
        self.emb_c = parameter(rng.normal(0.0, init_std, size=(self.n_c, dim)))
        self.emb_a = parameter(rng.normal(0.0, init_std, size=(2, dim)))
        self.attn = MonotonicAttention(rng, dim)
        self.head1 = Linear(rng, 2 * dim, hidden)
        self.head2 = Linear(rng, hidden, 1)
        self.aux1 = Linear(rng, 2 * dim, hidden)
        self.aux2 = Linear(rng, hidden, 1)
        self.window: int | None = None

    def entity(self, batch: SeqBatch) -> Tensor:
        _check_rows(batch.q, self.n_q, "question")
        _check_rows(batch.c, self.n_c, "concept")
        e = None
        if self.use_q:
            e = nc.take_rows(self.emb_q, batch.q)
        if self.use_c:
            ec = nc.take_rows(self.emb_c, batch.c)
            e = ec if e is None else e + ec
        return e

    def attended(self, batch: SeqBatch) -> tuple[Tensor, Tensor]:
        e = self.entity(batch)
        values = e + nc.take_rows(self.emb_a, batch.a)
        mask = history_mask(batch.mask, self.window)
        return self.attn(e, e, values, mask), e

    def logits(self, batch: SeqBatch) -> tuple[Tensor, Tensor | None]:
        ctx, e = self.attended(batch)
        main = self.head2(nc.gelu(self.head1(nc.concat([ctx, e], axis=-1))))[..., 0]
        aux = None
        if self.use_q and self.use_c:
            ec = nc.take_rows(self.emb_c, batch.c)
            aux = self.aux2(nc.gelu(self.aux1(nc.concat([ctx, ec], axis=-1))))[..., 0]
        return main, aux

    def question_vectors(self) -> np.ndarray:
        return self.emb_q.data.copy()

    def concept_vectors(self) -> np.ndarray:
        return self.emb_c.data.copy()


class TokenInit(Module):
    """Randomly initialised ID embeddings, learned later through the LM loss."""

    kind = "token-init"

    def __init__(self, rng: np.random.Generator, index: EntityIndex, dim: int, init_std: float = 0.1):
        self.n_q, self.n_c = index.n_questions, index.n_concepts
        self.emb_q = parameter(rng.normal(0.0, init_std, size=(self.n_q, dim)))
        self.emb_c = parameter(rng.normal(0.0, init_std, size=(self.n_c, dim)))

    def question_vectors(self) -> np.ndarray:
        return self.emb_q.data.copy()

    def concept_vectors(self) -> np.ndarray:
        return self.emb_c.data.copy()


# ---------------------------------------------------------------------------
# Encoder bundle, training, prediction
# ---------------------------------------------------------------------------


@dataclass
class SeqEncoder:
    model: Module
    index: EntityIndex
    config: SeqConfig
    trained: bool = False
    history: list[dict] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.config.kind


def build_encoder(index: EntityIndex, config: SeqConfig) -> SeqEncoder:
    rng = np.random.default_rng(config.seed)
    if config.kind == "dkt":
        model = DKT(rng, index, config.dim, config.hidden, config.init_std)
    elif config.kind == "akt-lite":
        model = AKTLite(rng, index, config.dim, config.hidden, config.init_std)
    else:
        model = TokenInit(rng, index, config.dim, config.init_std)
    return SeqEncoder(model, index, config)


def _sequences(ds: Dataset, students: Sequence[str]) -> list[list[Interaction]]:
    return [ds.by_student[s] for s in students if s in ds.by_student and ds.by_student[s]]


def _loss(model: Module, batch: SeqBatch, aux_weight: float) -> Tensor:
    main, aux = model.logits(batch)
    w = batch.mask.astype(float)
    loss = nc.bce_with_logits(main, batch.a, weights=w)
    if aux is not None and aux_weight > 0:
        loss = loss + nc.bce_with_logits(aux, batch.a, weights=w) * aux_weight
    return loss


def predict_steps(encoder: SeqEncoder, sequences: Sequence[Sequence[Interaction]],
                  batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Scores and labels for every step that has at least one predecessor."""
    if encoder.kind == "token-init":
        raise ValueError("token-init embeddings have no standalone predictor")
    scores, labels = [], []
    with nc.no_grad():
        for start in range(0, len(sequences), batch_size):
            batch = make_batch(sequences[start : start + batch_size], encoder.index)
            main, _ = encoder.model.logits(batch)
            keep = batch.mask.copy()
            keep[:, 0] = False
            scores.append(expit(main.data[keep]))
            labels.append(batch.a[keep].astype(bool))
    return np.concatenate(scores), np.concatenate(labels)


def student_scores(encoder: SeqEncoder, ds: Dataset, students: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Next-step scores and labels over the given students' sequences."""
    return predict_steps(encoder, _sequences(ds, students))


def evaluate_encoder(encoder: SeqEncoder, ds: Dataset, students: Sequence[str]) -> float:
    return auc(*student_scores(encoder, ds, students))


def train_seq_encoder(ds: Dataset, split: DatasetSplit, config: SeqConfig | None = None) -> SeqEncoder:
    """Fit DKT or AKT-lite on the training students with early stopping on validation AUC."""
    config = config or SeqConfig()
    encoder = build_encoder(EntityIndex.from_dataset(ds), config)
    if config.kind == "token-init":
        return encoder
    train = _sequences(ds, split.train)
    valid = _sequences(ds, split.valid)
    if not train:
        raise ValueError("training split is empty")
    if not valid:
        raise ValueError("validation split is empty")
    model = encoder.model
    opt = nc.AdamW(model.trainable(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    best_auc, best_state, bad = -np.inf, model.state_dict(), 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total, n_batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = make_batch([train[i] for i in order[start : start + config.batch_size]], encoder.index)
            opt.zero_grad()
            loss = _loss(model, batch, config.aux_weight)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        scores, labels = predict_steps(encoder, valid)
        valid_auc = auc(scores, labels)
        encoder.history.append({"epoch": epoch + 1, "train_loss": total / n_batches, "valid_auc": valid_auc})
        log.info("%s epoch %d loss %.4f valid auc %.4f", config.kind, epoch + 1, total / n_batches, valid_auc)
        if valid_auc > best_auc:
            best_auc, best_state, bad = valid_auc, model.state_dict(), 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state_dict(best_state)
    encoder.trained = True
    return encoder


# ---------------------------------------------------------------------------
# Embedding extraction and persistence
# ---------------------------------------------------------------------------


@dataclass
class IdEmbeddings:
    """Rows aligned with ``question_ids`` / ``concept_ids`` (empty tables when absent)."""

    question_ids: list[int]
    questions: np.ndarray
    concept_ids: list[int]
    concepts: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.questions.shape[1])

    def question(self, qid: int) -> np.ndarray:
        return self.questions[self.question_ids.index(qid)]

    def concept(self, cid: int) -> np.ndarray:
        return self.concepts[self.concept_ids.index(cid)]


def extract_id_embeddings(encoder: SeqEncoder) -> IdEmbeddings:
    if not encoder.trained and encoder.kind != "token-init":
        warnings.warn("extracting embeddings from an untrained sequence encoder", stacklevel=2)
    m, idx = encoder.model, encoder.index
    q = m.question_vectors() if idx.has_questions else np.zeros((0, encoder.config.dim))
    c = m.concept_vectors() if idx.has_concepts else np.zeros((0, encoder.config.dim))
    return IdEmbeddings(list(idx.question_ids), q, list(idx.concept_ids), c)


def save_embeddings(emb: IdEmbeddings, path) -> None:
    """JSON or CSV (by suffix) rows of ``kind, id, values``."""
    path = Path(path)
    rows = [("question", q, v) for q, v in zip(emb.question_ids, emb.questions)]
    rows += [("concept", c, v) for c, v in zip(emb.concept_ids, emb.concepts)]
    if path.suffix == ".json":
        path.write_text(json.dumps([{"kind": k, "id": int(i), "values": [float(x) for x in v]} for k, i, v in rows]))
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "id"] + [f"v{j}" for j in range(emb.dim)])
        for k, i, v in rows:
            w.writerow([k, int(i)] + [repr(float(x)) for x in v])


def load_embeddings(path) -> IdEmbeddings:
    path = Path(path)
    if path.suffix == ".json":
        rows = [(r["kind"], r["id"], r["values"]) for r in json.loads(path.read_text())]
    else:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = [(r[0], int(r[1]), [float(x) for x in r[2:]]) for r in reader]
    dim = len(rows[0][2]) if rows else 0
    q = [(i, v) for k, i, v in rows if k == "question"]
    c = [(i, v) for k, i, v in rows if k == "concept"]
    return IdEmbeddings([i for i, _ in q], np.array([v for _, v in q]).reshape(-1, dim),
                        [i for i, _ in c], np.array([v for _, v in c]).reshape(-1, dim))


def save_encoder(encoder: SeqEncoder, path) -> None:
    meta = {"config": asdict(encoder.config), "question_ids": encoder.index.question_ids,
            "concept_ids": encoder.index.concept_ids, "trained": encoder.trained, "history": encoder.history}
    nc.save_tensors(path, encoder.model.state_dict(), meta)


def load_encoder(path) -> SeqEncoder:
    tensors, meta = nc.load_tensors(path)
    encoder = build_encoder(EntityIndex(meta["question_ids"], meta["concept_ids"]), SeqConfig(**meta["config"]))
    encoder.model.load_state_dict(tensors)
    encoder.trained = meta["trained"]
    encoder.history = meta["history"]
    return encoder
