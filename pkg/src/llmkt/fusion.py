"""Adapters and the merge function that produce the vectors injected at slots.

A question slot receives ``g(adapt_context(r_QText), adapt_sequence(r_QID))``
and a concept slot ``g(adapt_context(r_CText), adapt_sequence(r_CID))``.
Missing modalities are simply left out of ``g``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .context import concept_string
from .data import Dataset, Interaction
from .numcore import Linear, Module, Tensor
from .prompt import Slot


class MergeKind(str, enum.Enum):
    ADD = "Add"
    AVG = "Avg"
    CONCAT = "Concat"

    @classmethod
    def parse(cls, value) -> MergeKind:
        if isinstance(value, MergeKind):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown merge kind {value!r}; expected Add, Avg or Concat")


class Adapter(Module):
    """Two-layer perceptron ``W2 . gelu(W1 . r + b1) + b2``."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, hidden: int | None = None):
        hidden = hidden or out_dim
        self.lin1 = Linear(rng, in_dim, hidden)
        self.lin2 = Linear(rng, hidden, out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, r: Tensor) -> Tensor:
        if r.shape[-1] != self.in_dim:
            raise ValueError(f"adapter expects input width {self.in_dim}, got {r.shape[-1]}")
        return self.lin2(nc.gelu(self.lin1(r)))


class Merge(Module):
    """``g``: Add, Avg, or Concat followed by a learned projection back to d^e."""

    def __init__(self, rng: np.random.Generator, kind, dim: int):
        self.kind = MergeKind.parse(kind)
        self.proj = Linear(rng, 2 * dim, dim) if self.kind is MergeKind.CONCAT else None
        self.dim = dim

    def __call__(self, h_cont: Tensor | None, h_seq: Tensor | None) -> Tensor:
        if h_cont is None and h_seq is None:
            raise ValueError("merge needs at least one input")
        if self.kind is MergeKind.CONCAT:
            ref = h_cont if h_cont is not None else h_seq
            zero = Tensor(np.zeros(ref.shape, dtype=ref.dtype))
            parts = [h_cont if h_cont is not None else zero, h_seq if h_seq is not None else zero]
            return self.proj(nc.concat(parts, axis=-1))
        if h_cont is None:
            return h_seq
        if h_seq is None:
            return h_cont
        total = h_cont + h_seq
        return total * 0.5 if self.kind is MergeKind.AVG else total

    def rows(self, h_cont: Tensor | None, has_cont: np.ndarray, h_seq: Tensor | None, has_seq: np.ndarray) -> Tensor:
        """Row-wise merge where each row may lack one input (rows lacking both are invalid)."""
        has_cont = np.asarray(has_cont, dtype=bool)
        has_seq = np.asarray(has_seq, dtype=bool)
        if np.any(~has_cont & ~has_seq):
            raise ValueError("a slot has neither context nor sequence information")
        if h_cont is None or not has_cont.any():
            return self(None, h_seq)
        if h_seq is None or not has_seq.any():
            return self(h_cont, None)
        dtype = h_cont.dtype
        mc = Tensor(has_cont[:, None].astype(dtype))
        ms = Tensor(has_seq[:, None].astype(dtype))
        a, b = h_cont * mc, h_seq * ms
        if self.kind is MergeKind.CONCAT:
            return self.proj(nc.concat([a, b], axis=-1))
        if self.kind is MergeKind.ADD:
            return a + b
        both = has_cont & has_seq
        scale = np.where(both, 0.5, 1.0)[:, None].astype(dtype)
        return (a + b) * Tensor(scale)


# ---------------------------------------------------------------------------
# Entity features: which text / sequence row backs every possible slot
# ---------------------------------------------------------------------------


@dataclass
class EntityFeatures:
    """Fixed lookup from slot keys to (text row, sequence row) pairs.

    Sequence rows index the stacked table ``[questions; concepts]``. Keys are
    ``("Q", question_id)`` and ``("C", concept_ids)``; a concept slot's text
    is every concept text of its item joined with '; '.
    """

    texts: list[str]
    n_questions: int
    keys: list[tuple] = field(default_factory=list)
    text_rows: list[int] = field(default_factory=list)  # -1 when absent
    seq_rows: list[int] = field(default_factory=list)  # -1 when absent
    _key_index: dict = field(default_factory=dict)

    @classmethod
    def from_dataset(cls, ds: Dataset, question_ids: Sequence[int], concept_ids: Sequence[int]) -> EntityFeatures:
        qrow = {q: i for i, q in enumerate(question_ids)}
        crow = {c: len(question_ids) + i for i, c in enumerate(concept_ids)}
        texts: dict[str, int] = {}

        def text_row(t):
            if not t:
                return -1
            return texts.setdefault(t, len(texts))

        feats = cls([], len(question_ids))
        for it in ds.interactions():
            for key, t, srow in cls._requests(it, qrow, crow):
                if key not in feats._key_index:
                    feats._key_index[key] = len(feats.keys)
                    feats.keys.append(key)
                    feats.text_rows.append(text_row(t))
                    feats.seq_rows.append(srow)
        feats.texts = list(texts)
        return feats

    @staticmethod
    def _requests(it: Interaction, qrow, crow):
        if it.question_id is not None:
            yield ("Q", it.question_id), it.question_text, qrow.get(it.question_id, -1)
        if it.concept_ids:
            yield ("C", tuple(it.concept_ids)), concept_string(it), crow.get(it.concept_ids[0], -1)

    def row(self, slot: Slot, it: Interaction) -> int:
        key = ("Q", it.question_id) if slot is Slot.QUES else ("C", tuple(it.concept_ids))
        try:
            return self._key_index[key]
        except KeyError:
            raise KeyError(f"no features for slot {slot.value} of {it.student_id}/{it.seq_index}") from None

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def has_text(self) -> np.ndarray:
        return np.array(self.text_rows) >= 0

    @property
    def has_seq(self) -> np.ndarray:
        return np.array(self.seq_rows) >= 0


class Fusion(Module):
    """Context adapter, sequence adapter and merge, evaluated for every slot key at once."""

    def __init__(self, rng: np.random.Generator, d_text: int, d_seq: int, d_model: int, merge="Add"):
        self.context_adapter = Adapter(rng, d_text, d_model)
        self.sequence_adapter = Adapter(rng, d_seq, d_model)
        self.merge = Merge(rng, merge, d_model)

    def table(self, feats: EntityFeatures, text_vectors: Tensor | None, seq_table: Tensor | None,
              use_context: bool = True, use_sequence: bool = True) -> Tensor:
        """(n_keys, d^e) fused vectors; ``use_*=False`` removes a branch entirely."""
        has_c = feats.has_text & use_context & (text_vectors is not None)
        has_s = feats.has_seq & use_sequence & (seq_table is not None)
        h_c = h_s = None
        if has_c.any():
            rows = np.where(has_c, feats.text_rows, 0)
            h_c = self.context_adapter(nc.take_rows(text_vectors, rows))
        if has_s.any():
            rows = np.where(has_s, feats.seq_rows, 0)
            h_s = self.sequence_adapter(nc.take_rows(seq_table, rows))
        return self.merge.rows(h_c, has_c, h_s, has_s)
