"""Miniature decoder-only language model with slot injection and LoRA.

The model reads token ids, except at slot positions where the embedding row
is replaced by an injected vector. Attention projections for queries and
values can be wrapped by low-rank adapters; only those adapters (plus the
plug-in modules) are trained for knowledge tracing.

Row-vector convention: a linear map is ``x @ W`` with ``W`` of shape
(in, out), so the LoRA factors are stored as ``A`` (in, r) and ``B`` (r, out).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import numcore as nc
from .context import merge_heads, split_heads
from .numcore import LayerNorm, Linear, Module, Tensor, parameter
from .prompt import PackedPlan, PromptPlan


@dataclass
class LMConfig:
    dim: int = 64  # d^e
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    init_std: float = 0.1
    embed_std: float = 0.5  # wide enough that the tied head can separate tokens
    pos_scale: float = 0.1
    tie_head: bool = True
    recency_bias: bool = True  # per-head linear distance penalty on attention scores
    global_heads: int = 1  # trailing heads exempt from the penalty

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("dim must be a multiple of n_heads")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        if not 0 <= self.global_heads <= self.n_heads:
            raise ValueError("global_heads must be in [0, n_heads]")


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 8.0
    dropout: float = 0.1
    targets: tuple[str, ...] = ("query", "value")

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.rank < 1 or self.alpha <= 0 or not 0 <= self.dropout < 1:
            raise ValueError("invalid LoRA configuration")
        bad = set(self.targets) - {"query", "key", "value", "out"}
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def large(cls) -> LoRAConfig:
        """Rank-32 setting used for billion-parameter bases."""
        return cls(rank=32, alpha=32.0, dropout=0.1)


def lora_apply(w_frozen: Tensor, a: Tensor, b: Tensor, scale: float, x: Tensor, x_dropped: Tensor | None = None,
               bias: Tensor | None = None) -> Tensor:
    """``x W (+ bias) + scale * (dropout(x) A) B``."""
    if x.shape[-1] != w_frozen.shape[0] or a.shape[0] != w_frozen.shape[0] or b.shape[1] != w_frozen.shape[1]:
        raise ValueError(f"LoRA shapes do not conform: x {x.shape}, W {w_frozen.shape}, A {a.shape}, B {b.shape}")
    y = x @ w_frozen
    if bias is not None:
        y = y + bias
    low = (x if x_dropped is None else x_dropped) @ a @ b
    return y + low * scale


class LoRALinear(Module):
    """A frozen ``Linear`` plus a trainable low-rank update (B starts at zero)."""

    def __init__(self, base: Linear, rng: np.random.Generator, rank: int, alpha: float, dropout: float):
        self.base = base
        self.lora_a = parameter(rng.normal(0.0, 1.0 / np.sqrt(base.in_dim), size=(base.in_dim, rank)))
        self.lora_b = parameter(np.zeros((rank, base.out_dim)))
        self.scale = alpha / rank
        self.dropout = dropout
        self.rng: np.random.Generator | None = None
        self.in_dim, self.out_dim = base.in_dim, base.out_dim

    def __call__(self, x: Tensor) -> Tensor:
        xd = None
        if self.training and self.dropout > 0 and self.rng is not None:
            keep = (self.rng.random(x.shape) >= self.dropout).astype(x.dtype) / (1.0 - self.dropout)
            xd = x * Tensor(keep)
        return lora_apply(self.base.weight, self.lora_a, self.lora_b, self.scale, x, xd, self.base.bias)


class DecoderBlock(Module):
    def __init__(self, rng: np.random.Generator, cfg: LMConfig):
        d = cfg.dim
        self.n_heads = cfg.n_heads
        self.ln1 = LayerNorm(d)
        self.w_query = Linear(rng, d, d)
        self.w_key = Linear(rng, d, d, bias=False)  # a key bias cannot change the softmax
        self.w_value = Linear(rng, d, d)
        self.w_out = Linear(rng, d, d)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, cfg.ffn_mult * d)
        self.ff2 = Linear(rng, cfg.ffn_mult * d, d)

    def qkv(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        H = self.n_heads
        return split_heads(self.w_query(h), H), split_heads(self.w_key(h), H), split_heads(self.w_value(h), H)

    def feed_forward(self, x: Tensor) -> Tensor:
        return x + self.ff2(nc.gelu(self.ff1(self.ln2(x))))

    def __call__(self, x: Tensor, mask: np.ndarray, bias: np.ndarray | None = None) -> Tensor:
        q, k, v = self.qkv(self.ln1(x))
        x = x + self.w_out(merge_heads(nc.attention(q, k, v, mask, bias=bias)))
        return self.feed_forward(x)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def recency_slopes(n_heads: int, n_global: int = 0) -> np.ndarray:
    """Geometric slopes 2^(-8h/H') over the first H' = H - n_global heads, then zeros."""
    n_local = n_heads - n_global
    local = 2.0 ** (-8.0 * np.arange(1, n_local + 1) / n_local) if n_local else np.zeros(0)
    return np.concatenate([local, np.zeros(n_global)])


def distance_bias(slopes: np.ndarray, q_pos: np.ndarray, k_pos: np.ndarray, dtype) -> np.ndarray:
    """``-slope_h * (q_pos - k_pos)`` with shape (H, *q_pos.shape, k_pos.shape[-1])."""
    dist = np.asarray(q_pos)[..., None] - np.asarray(k_pos)[..., None, :]
    return (-slopes.reshape((-1,) + (1,) * dist.ndim) * dist).astype(dtype)


_POS_CACHE: dict[tuple[int, str], np.ndarray] = {}


def positions_table(n: int, dim: int, dtype) -> np.ndarray:
    key = (dim, np.dtype(dtype).str)
    table = _POS_CACHE.get(key)
    if table is None or len(table) < n:
        table = nc.sinusoidal_positions(max(n, 2048), dim).astype(dtype)
        _POS_CACHE[key] = table
    return table[:n]


class ToyLM(Module):
    """Pre-LN causal transformer; output head tied to the token embeddings by default."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, config: LMConfig | None = None):
        cfg = config or LMConfig()
        self.config = cfg
        self.vocab_size = vocab_size
        self.tok_emb = parameter(rng.normal(0.0, cfg.embed_std, size=(vocab_size, cfg.dim)))
        self.blocks = [DecoderBlock(rng, cfg) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.dim)
        self.head = None if cfg.tie_head else Linear(rng, cfg.dim, vocab_size, bias=False)

    @property
    def dim(self) -> int:
        return self.config.dim

    # ---------------------------------------------------------------- pieces
    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError("token id out of range")
        return nc.take_rows(self.tok_emb, ids)

    def add_positions(self, x: Tensor, positions: np.ndarray) -> Tensor:
        positions = np.asarray(positions, dtype=np.int64)
        table = positions_table(int(positions.max()) + 1, self.dim, x.dtype)
        return x + Tensor(table[positions] * self.config.pos_scale)

    def attention_bias(self, q_pos: np.ndarray, k_pos: np.ndarray, dtype) -> np.ndarray | None:
        if not self.config.recency_bias:
            return None
        return distance_bias(recency_slopes(self.config.n_heads, self.config.global_heads), q_pos, k_pos, dtype)

    def project(self, h: Tensor) -> Tensor:
        h = self.ln_f(h)
        if self.head is not None:
            return self.head(h)
        return h @ nc.swapaxes(self.tok_emb, 0, 1)

    # --------------------------------------------------------- standalone
    def logits_all(self, x: Tensor) -> Tensor:
        """Logits at every position of one embedded sequence ``x`` (T, d)."""
        T = x.shape[0]
        h = self.add_positions(x, np.arange(T))
        mask = causal_mask(T)
        bias = self.attention_bias(np.arange(T), np.arange(T), x.dtype)
        for block in self.blocks:
            h = block(h, mask, bias)
        return self.project(h)

    # ------------------------------------------------------------- packed
    def packed_logits(self, x_stream: Tensor, x_branch: Tensor, cuts: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Answer logits (K, V) for K branches sharing one stream.

        ``x_stream`` (S, d) and ``x_branch`` (K, M, d) are embedded (and
        injected) inputs; branch k is ``lengths[k]`` tokens long and sees the
        first ``cuts[k]`` stream tokens. Only the last token of each branch is
        carried through the final layer.
        """
        cuts = np.asarray(cuts, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        S = x_stream.shape[0]
        K, M = x_branch.shape[0], x_branch.shape[1]
        if cuts.max(initial=0) > S or np.any(lengths < 1) or lengths.max() > M:
            raise ValueError("branch cuts/lengths inconsistent with inputs")
        hs = self.add_positions(x_stream, np.arange(S))
        hb = self.add_positions(x_branch, cuts[:, None] + np.arange(M)[None, :])
        see_stream = np.arange(S)[None, :] < cuts[:, None]  # (K, S)
        j = np.arange(M)
        see_branch = (j[None, :] <= j[:, None])[None] & (j[None, None, :] < lengths[:, None, None])  # (K, M, M)
        stream_mask = causal_mask(S)
        last = lengths - 1
        rows = np.arange(K)
        s_pos = np.arange(S)
        b_pos = cuts[:, None] + np.arange(M)[None, :]  # (K, M)
        dt = x_stream.dtype
        bias_ss = self.attention_bias(s_pos, s_pos, dt)
        bias_bs = self.attention_bias(b_pos, s_pos[None, :], dt)
        bias_bb = self.attention_bias(b_pos, b_pos, dt)
        for li, block in enumerate(self.blocks):
            final = li == len(self.blocks) - 1
            qs, ks, vs = block.qkv(block.ln1(hs))
            qb, kb, vb = (nc.swapaxes(t, 0, 1) for t in block.qkv(block.ln1(hb)))  # (H, K, M, dh)
            if final:
                # queries are needed only at each branch's last token
                qb = qb[:, rows, last][:, :, None, :]  # (H, K, 1, dh)
                sel = (lambda b: None if b is None else b[:, rows, last][:, :, None, :])
                ctx = nc.prefix_attention(qb, ks, vs, kb, vb, see_stream[:, None, :], see_branch[rows, last][:, None, :],
                                          bias_shared=sel(bias_bs), bias_own=sel(bias_bb))
                resid = hb[rows, last]  # (K, d)
                out = resid + block.w_out(merge_heads(nc.swapaxes(ctx, 0, 1))[:, 0, :])
                return self.project(block.feed_forward(out))
            ctx = nc.prefix_attention(qb, ks, vs, kb, vb, see_stream[:, None, :], see_branch,
                                      bias_shared=bias_bs, bias_own=bias_bb)
            hb = block.feed_forward(hb + block.w_out(merge_heads(nc.swapaxes(ctx, 0, 1))))
            hs = block.feed_forward(hs + block.w_out(merge_heads(nc.attention(qs, ks, vs, stream_mask, bias=bias_ss))))
        raise AssertionError("unreachable")

    # --------------------------------------------------------------- LoRA
    def attach_lora(self, rng: np.random.Generator, cfg: LoRAConfig) -> None:
        """Freeze every base weight and wrap the target projections."""
        self.freeze()
        for block in self.blocks:
            for name in cfg.targets:
                attr = f"w_{name}"
                layer = getattr(block, attr)
                if isinstance(layer, LoRALinear):
                    raise ValueError("LoRA already attached")
                setattr(block, attr, LoRALinear(layer, rng, cfg.rank, cfg.alpha, cfg.dropout))

    def lora_layers(self) -> list[LoRALinear]:
        return [m for b in self.blocks for m in vars(b).values() if isinstance(m, LoRALinear)]

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for layer in self.lora_layers():
            layer.rng = rng

    def base_checksum(self) -> str:
        """Checksum of everything except LoRA factors."""
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            if ".lora_" in name:
                continue
            h.update(name.replace(".base.", ".").encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Injection and answer probabilities for single plans
# ---------------------------------------------------------------------------


def inject(lm: ToyLM, ids: np.ndarray, positions: Sequence[int], slots: Tensor | None) -> Tensor:
    """Embed ``ids`` and overwrite the rows at ``positions`` with ``slots``."""
    x = lm.embed(ids)
    positions = np.asarray(positions, dtype=np.int64)
    n = 0 if slots is None else slots.shape[0]
    if len(positions) != n:
        raise ValueError(f"{len(positions)} slot positions but {n} slot vectors")
    if n == 0:
        return x
    if positions.min() < 0 or positions.max() >= len(ids):
        raise ValueError("slot position out of range")
    if slots.shape[-1] != lm.dim:
        raise ValueError(f"slot vectors must have width {lm.dim}")
    return nc.replace_rows(x, positions, slots)


def injected_logits(lm: ToyLM, plan: PromptPlan, slots: Tensor | None) -> Tensor:
    """Logits at every position of a plan after slot injection (T, V)."""
    positions = [b.position for b in plan.slot_bindings]
    return lm.logits_all(inject(lm, plan.token_ids, positions, slots))


def forward_injected(lm: ToyLM, plan: PromptPlan, slots: Tensor | None) -> Tensor:
    """Full-vocabulary logits at the answer position."""
    return injected_logits(lm, plan, slots)[plan.answer_position]


def yes_probability(z_yes, z_no) -> np.ndarray:
    """exp(z_yes) / (exp(z_yes) + exp(z_no)) in overflow-free form."""
    return expit(np.asarray(z_yes, dtype=np.float64) - np.asarray(z_no, dtype=np.float64))


def predict_prob(lm: ToyLM, plan: PromptPlan, slots: Tensor | None, yes_id: int, no_id: int) -> float:
    with nc.no_grad():
        z = forward_injected(lm, plan, slots).data
    return float(yes_probability(z[yes_id], z[no_id]))


# ---------------------------------------------------------------------------
# Packed inputs
# ---------------------------------------------------------------------------


@dataclass
class PackedInputs:
    """Arrays for ``ToyLM.packed_logits`` built from a ``PackedPlan``."""

    stream_ids: np.ndarray
    stream_slot_pos: np.ndarray
    branch_ids: np.ndarray  # (K, M), padded
    branch_slot_rows: np.ndarray  # flat indices into (K*M)
    cuts: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_plan(cls, plan: PackedPlan, pad_id: int) -> PackedInputs:
        K = len(plan.branches)
        M = max(len(b.token_ids) for b in plan.branches)
        ids = np.full((K, M), pad_id, dtype=np.int64)
        rows = []
        for k, br in enumerate(plan.branches):
            ids[k, : len(br.token_ids)] = br.token_ids
            rows.extend(k * M + b.position for b in br.slot_bindings)
        return cls(plan.stream_ids, np.array([b.position for b in plan.stream_bindings], dtype=np.int64), ids,
                   np.array(rows, dtype=np.int64), np.array([b.cut for b in plan.branches], dtype=np.int64),
                   np.array([len(b.token_ids) for b in plan.branches], dtype=np.int64))


def packed_answer_logits(lm: ToyLM, inputs: PackedInputs, stream_slots: Tensor | None,
                         branch_slots: Tensor | None) -> Tensor:
    xs = lm.embed(inputs.stream_ids)
    if len(inputs.stream_slot_pos):
        xs = nc.replace_rows(xs, inputs.stream_slot_pos, stream_slots)
    xb = lm.embed(inputs.branch_ids)
    if len(inputs.branch_slot_rows):
        xb = nc.replace_rows(xb, inputs.branch_slot_rows, branch_slots)
    return lm.packed_logits(xs, xb, inputs.cuts, inputs.lengths)
