"""Small trainable text encoder that turns question/concept texts into vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import HistoryWindow, Interaction
from .numcore import LayerNorm, Linear, Module, Tensor, parameter
from .prompt import Vocab, tokenize


@dataclass
class ContextConfig:
    dim: int = 64  # d^t
    n_heads: int = 4
    ffn_mult: int = 2
    frozen: bool = False
    init_std: float = 0.1

    def __post_init__(self):
        if self.dim <= 0 or self.n_heads <= 0 or self.dim % self.n_heads:
            raise ValueError("dim must be a positive multiple of n_heads")


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., T, d) -> (..., H, T, d/H)."""
    *lead, T, d = x.shape
    return nc.swapaxes(x.reshape(*lead, T, n_heads, d // n_heads), -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., H, T, dh) -> (..., T, H*dh)."""
    *lead, H, T, dh = x.shape
    return nc.swapaxes(x, -3, -2).reshape(*lead, T, H * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention over (..., H, T, dh) with a boolean mask."""
    return nc.attention(q, k, v, mask)


class ContextEncoder(Module):
    """Token embeddings + sinusoidal positions + one bidirectional transformer block.

    A text's vector is the mean of the block's output over its real tokens.
    """

    def __init__(self, rng: np.random.Generator, vocab_size: int, config: ContextConfig | None = None):
        cfg = config or ContextConfig()
        d = cfg.dim
        self.config = cfg
        self.tok_emb = parameter(rng.normal(0.0, cfg.init_std, size=(vocab_size, d)))
        self.ln1 = LayerNorm(d)
        self.w_query = Linear(rng, d, d)
        self.w_key = Linear(rng, d, d, bias=False)  # a key bias cannot change the softmax
        self.w_value = Linear(rng, d, d)
        self.w_out = Linear(rng, d, d)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, cfg.ffn_mult * d)
        self.ff2 = Linear(rng, cfg.ffn_mult * d, d)

    @property
    def dim(self) -> int:
        return self.config.dim

    def __call__(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Encode a padded batch ``ids`` (N, T) with real lengths (N,) into (N, d^t)."""
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 1):
            raise ValueError("cannot encode empty text")
        N, T = ids.shape
        real = np.arange(T)[None, :] < lengths[:, None]
        pos = nc.sinusoidal_positions(T, self.dim).astype(self.tok_emb.dtype)
        x = nc.take_rows(self.tok_emb, ids) + Tensor(pos)
        h = self.ln1(x)
        H = self.config.n_heads
        ctx = attention(split_heads(self.w_query(h), H), split_heads(self.w_key(h), H),
                        split_heads(self.w_value(h), H), real[:, None, None, :])
        x = x + self.w_out(merge_heads(ctx))
        x = x + self.ff2(nc.gelu(self.ff1(self.ln2(x))))
        w = real / lengths[:, None]
        return (x * Tensor(w[:, :, None].astype(x.dtype))).sum(axis=1)


def pad_token_lists(seqs: Sequence[np.ndarray], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, int(lengths.max(initial=1)))), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def encode_texts(model: ContextEncoder, texts: Sequence[str], vocab: Vocab) -> Tensor:
    """Differentiable encoding of several texts, one row each."""
    token_lists = [tokenize(t, vocab) for t in texts]
    for t, ids in zip(texts, token_lists):
        if len(ids) == 0:
            raise ValueError(f"cannot encode empty text {t!r}")
    ids, lengths = pad_token_lists(token_lists, vocab.pad_id)
    return model(ids, lengths)


def encode_text(model: ContextEncoder, text: str, vocab: Vocab) -> np.ndarray:
    with nc.no_grad():
        return encode_texts(model, [text], vocab).data[0].copy()


def concept_string(it: Interaction) -> str | None:
    """All concept texts of an item, joined with '; '."""
    if not it.concept_texts:
        return None
    return "; ".join(it.concept_texts)


def encode_entity_texts(model: ContextEncoder, window: HistoryWindow, vocab: Vocab) -> list[dict[str, np.ndarray]]:
    """Per item (history then target): vectors for whichever texts it has."""
    out = []
    for it in (*window.history, window.target):
        entry = {}
        if it.question_text:
            entry["question"] = encode_text(model, it.question_text, vocab)
        cs = concept_string(it)
        if cs:
            entry["concept"] = encode_text(model, cs, vocab)
        out.append(entry)
    return out
