"""Instruction templates with embedding slots, a word-level tokenizer, and prompt plans."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import HistoryWindow, Interaction

QSLOT = "[QSLOT]"
CSLOT = "[CSLOT]"
PAD = "[PAD]"
UNK = "[UNK]"
YES = "Yes"
NO = "No"
RESERVED = (PAD, UNK, QSLOT, CSLOT, YES, NO)

HEADER = "The student has previously, in chronological order, answered "
ITEM_SEP = ", "
TERMINAL = " Response with 'Yes' or 'No'. Response:"
TYPE4_HEADER = (
    "In this task, we aim to determine whether the student can answer the question correctly "
    "based on the student's history record of academic exercises.\n"
    "The student's history record of academic exercises is given as follows:\n"
)


class TemplateKind(enum.IntEnum):
    TYPE1 = 1  # question id + concept id
    TYPE2 = 2  # question id only
    TYPE3 = 3  # concept id only
    TYPE4 = 4  # full question text
    TYPE5 = 5  # concept text

    @classmethod
    def parse(cls, value) -> TemplateKind:
        if isinstance(value, TemplateKind):
            return value
        s = str(value).lower().replace("type", "").strip()
        return cls(int(s))


class Slot(str, enum.Enum):
    QUES = "QuesSlot"
    CONC = "ConcSlot"


class Drop(str, enum.Enum):
    QUESTION = "Question"
    CONCEPT = "Concept"


SLOTS_PER_ITEM = {TemplateKind.TYPE1: 2, TemplateKind.TYPE2: 1, TemplateKind.TYPE3: 1,
                  TemplateKind.TYPE4: 0, TemplateKind.TYPE5: 1}


def required_fields(kind: TemplateKind) -> tuple[str, ...]:
    return {
        TemplateKind.TYPE1: ("question_id", "concept_ids"),
        TemplateKind.TYPE2: ("question_id",),
        TemplateKind.TYPE3: ("concept_ids",),
        TemplateKind.TYPE4: ("question_text",),
        TemplateKind.TYPE5: ("concept_texts",),
    }[kind]


def compatible_kinds(has_qid: bool, has_cid: bool, has_qtext: bool, has_ctext: bool) -> list[TemplateKind]:
    out = []
    if has_qid and has_cid:
        out.append(TemplateKind.TYPE1)
    if has_qid:
        out.append(TemplateKind.TYPE2)
    if has_cid:
        out.append(TemplateKind.TYPE3)
    if has_qtext:
        out.append(TemplateKind.TYPE4)
    if has_ctext and has_cid:
        out.append(TemplateKind.TYPE5)
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _check(kind: TemplateKind, it: Interaction) -> None:
    for name in required_fields(kind):
        value = getattr(it, name)
        if value is None or (isinstance(value, tuple) and len(value) == 0):
            raise ValueError(f"template {kind.name} needs field {name!r} (student {it.student_id}, "
                             f"seq_index {it.seq_index})")


def _outcome(correct: bool) -> str:
    return "correctly" if correct else "incorrectly"


def _question_phrase(kind: TemplateKind, it: Interaction) -> str:
    """The entity description shared by history items and the target."""
    if kind is TemplateKind.TYPE1:
        return f"question with ID={it.question_id} {QSLOT} involving concept ID={it.concept_ids[0]} {CSLOT}"
    if kind is TemplateKind.TYPE2:
        return f"question with ID={it.question_id} {QSLOT}"
    if kind is TemplateKind.TYPE3:
        return f"question involving concept ID={it.concept_ids[0]} {CSLOT}"
    if kind is TemplateKind.TYPE5:
        return f'question involving concept "{it.concept_texts[0]}" {CSLOT}'
    raise ValueError(f"{kind.name} has no inline question phrase")


def _type4_block(it: Interaction, with_concepts: bool) -> str:
    lines = [it.question_text]
    if with_concepts and it.concept_texts:
        lines.append("Related knowledge concepts: " + ", ".join(it.concept_texts))
    return "\n".join(lines)


@dataclass(frozen=True)
class RenderedParts:
    """Prompt text split so that ``header + ITEM_SEP.join(items) + tail`` is the full prompt."""

    header: str
    items: tuple[str, ...]
    tail: str
    separator: str = ITEM_SEP

    @property
    def text(self) -> str:
        return self.header + self.separator.join(self.items) + self.tail


def render_parts(kind, window: HistoryWindow, drop: Iterable[Drop | str] = ()) -> RenderedParts:
    kind = TemplateKind.parse(kind)
    kind = _ablated_kind(kind, drop)
    for it in (*window.history, window.target):
        _check(kind, it)
    if kind is TemplateKind.TYPE4:
        with_concepts = Drop.CONCEPT not in {Drop(d) for d in drop}
        items = tuple(
            f"{i + 1}) {_type4_block(it, with_concepts)}\nThe student answered this question {_outcome(it.correct)}"
            for i, it in enumerate(window.history)
        )
        tail = (
            "\nThe target question is given as follows:\n"
            + _type4_block(window.target, with_concepts)
            + "\nPlease predict whether the student would answer the target question correctly."
            + TERMINAL
        )
        return RenderedParts(TYPE4_HEADER, items, tail, separator="\n")
    items = tuple(f"{_question_phrase(kind, it)} {_outcome(it.correct)}" for it in window.history)
    tail = (
        ". Please predict whether the student will answer the next "
        + _question_phrase(kind, window.target)
        + " correctly."
        + TERMINAL
    )
    return RenderedParts(HEADER, items, tail)


def render(kind, window: HistoryWindow) -> str:
    """Instruction text with ``[QSLOT]``/``[CSLOT]`` markers for one history window."""
    return render_parts(kind, window).text


def _ablated_kind(kind: TemplateKind, drop) -> TemplateKind:
    drops = {Drop(d) for d in drop}
    if not drops:
        return kind
    if drops == {Drop.QUESTION, Drop.CONCEPT}:
        raise ValueError("cannot drop both question and concept: nothing left to render")
    if kind is TemplateKind.TYPE1:
        return TemplateKind.TYPE3 if Drop.QUESTION in drops else TemplateKind.TYPE2
    if kind is TemplateKind.TYPE2:
        if Drop.QUESTION in drops:
            raise ValueError("TYPE2 without the question has no content")
        return kind
    if kind in (TemplateKind.TYPE3, TemplateKind.TYPE5):
        if Drop.CONCEPT in drops:
            raise ValueError(f"{kind.name} without the concept has no content")
        return kind
    # TYPE4: dropping the question text leaves the concept-text template
    if Drop.QUESTION in drops:
        return TemplateKind.TYPE5
    return kind


def render_ablated(kind, window: HistoryWindow, drop: Iterable[Drop | str]) -> str:
    """Render with the question or concept information removed from every item."""
    return render_parts(kind, window, drop).text


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\[[A-Z]+\]|\w+|[^\w\s]")
_NO_SPACE_BEFORE = {",", ".", ":", ";", "?", "!", ")", "="}
_NO_SPACE_AFTER = {"(", "=", "\n"}
_QUOTES = {"'", '"'}


def split_words(text: str) -> list[str]:
    """Word/punctuation segmentation; newlines survive as their own token."""
    out = []
    for line_no, line in enumerate(text.split("\n")):
        if line_no:
            out.append("\n")
        out.extend(_TOKEN_RE.findall(line))
    return out


def join_words(words: Sequence[str]) -> str:
    out: list[str] = []
    open_quote = {q: False for q in _QUOTES}
    glue_next = True
    for w in words:
        if w in _QUOTES:
            if open_quote[w]:
                out.append(w)
                open_quote[w] = False
                glue_next = False
            else:
                out.append(w if glue_next else " " + w)
                open_quote[w] = True
                glue_next = True
            continue
        if w == "\n":
            out.append(w)
            glue_next = True
            continue
        if glue_next or w in _NO_SPACE_BEFORE:
            out.append(w)
        else:
            out.append(" " + w)
        glue_next = w in _NO_SPACE_AFTER
    return "".join(out)


class Vocab:
    """Token to id map; reserved tokens first, the rest sorted for stability."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocab:
        words = set()
        for t in texts:
            words.update(split_words(t))
        words.difference_update(RESERVED)
        return cls(list(RESERVED) + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def qslot_id(self) -> int:
        return self.index[QSLOT]

    @property
    def cslot_id(self) -> int:
        return self.index[CSLOT]

    @property
    def yes_id(self) -> int:
        return self.index[YES]

    @property
    def no_id(self) -> int:
        return self.index[NO]

    def to_json(self) -> dict[str, int]:
        return dict(self.index)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=0))

    @classmethod
    def load(cls, path) -> Vocab:
        mapping = json.loads(Path(path).read_text())
        tokens = [None] * len(mapping)
        for t, i in mapping.items():
            tokens[i] = t
        return cls(tokens)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.tokens, ensure_ascii=False).encode()).hexdigest()[:16]


def tokenize(text: str, vocab: Vocab) -> np.ndarray:
    return np.array([vocab.id(w) for w in split_words(text)], dtype=np.int64)


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return join_words([vocab.tokens[int(i)] for i in ids])


# ---------------------------------------------------------------------------
# Prompt plans
# ---------------------------------------------------------------------------

TARGET = -1


@dataclass(frozen=True)
class SlotBinding:
    position: int
    slot: Slot
    ref: int  # history index, or TARGET
    entity_id: int


@dataclass(frozen=True)
class PromptPlan:
    token_ids: np.ndarray
    slot_bindings: tuple[SlotBinding, ...]
    answer_position: int
    branch_start: int  # first token after the last history item
    kind: TemplateKind

    def __len__(self) -> int:
        return len(self.token_ids)


def _item_bindings(kind: TemplateKind, ids: np.ndarray, offset: int, it: Interaction, ref: int,
                   vocab: Vocab) -> list[SlotBinding]:
    out = []
    for pos in np.flatnonzero((ids == vocab.qslot_id) | (ids == vocab.cslot_id)):
        if ids[pos] == vocab.qslot_id:
            out.append(SlotBinding(offset + int(pos), Slot.QUES, ref, int(it.question_id)))
        else:
            out.append(SlotBinding(offset + int(pos), Slot.CONC, ref, int(it.concept_ids[0])))
    return out


def tokenize_parts(parts: RenderedParts, vocab: Vocab):
    """Token ids of header, separator, each history item and tail.

    Part boundaries fall between words, so concatenating these reproduces
    ``tokenize(parts.text)``.
    """
    return (tokenize(parts.header, vocab), tokenize(parts.separator, vocab),
            [tokenize(s, vocab) for s in parts.items], tokenize(parts.tail, vocab))


def plan_prompt(kind, window: HistoryWindow, vocab: Vocab, drop: Iterable[Drop | str] = ()) -> PromptPlan:
    """Tokenize a window's instruction and record where each embedding slot sits."""
    kind = TemplateKind.parse(kind)
    drop = tuple(drop)
    parts = render_parts(kind, window, drop)
    eff_kind = _ablated_kind(kind, drop)
    head, sep, items, tail = tokenize_parts(parts, vocab)
    chunks: list[np.ndarray] = [head]
    bindings: list[SlotBinding] = []
    offset = len(head)
    for i, (ids, it) in enumerate(zip(items, window.history)):
        if i:
            chunks.append(sep)
            offset += len(sep)
        bindings.extend(_item_bindings(eff_kind, ids, offset, it, i, vocab))
        chunks.append(ids)
        offset += len(ids)
    branch_start = offset
    bindings.extend(_item_bindings(eff_kind, tail, offset, window.target, TARGET, vocab))
    chunks.append(tail)
    token_ids = np.concatenate(chunks)
    return PromptPlan(token_ids, tuple(bindings), len(token_ids) - 1, branch_start, eff_kind)


def template_corpus(dataset, kinds: Iterable[TemplateKind] = tuple(TemplateKind)) -> list[str]:
    """Texts whose words must be in the vocabulary for ``dataset`` and the given kinds."""
    texts = [HEADER, ITEM_SEP, TERMINAL, TYPE4_HEADER, "\n",
             ". Please predict whether the student will answer the next question with ID= involving "
             "concept ID= correctly incorrectly",
             "The target question is given as follows: Please predict whether the student would answer "
             "the target question correctly. Related knowledge concepts: The student answered this question "
             'correctly incorrectly ) " "']
    ids = set(dataset.question_ids) | set(dataset.concept_ids)
    texts.extend(str(i) for i in sorted(ids))
    texts.extend(dataset.question_text.values())
    texts.extend(dataset.concept_text.values())
    n = max((len(v) for v in dataset.by_student.values()), default=0)
    texts.extend(str(i) for i in range(1, n + 1))
    return texts


# ---------------------------------------------------------------------------
# Packed plans: windows of one student sharing a history prefix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchPlan:
    """Tokens after the shared history for one target; positions continue from ``cut``."""

    cut: int  # number of stream tokens this window sees
    token_ids: np.ndarray
    slot_bindings: tuple[SlotBinding, ...]  # positions relative to the branch start


@dataclass(frozen=True)
class PackedPlan:
    """Several windows whose prompts are ``stream[:cut] + branch`` for a shared stream.

    Equivalent to the individual plans under a causal model: each branch
    attends to the stream prefix it would have seen on its own.
    """

    stream_ids: np.ndarray
    stream_bindings: tuple[SlotBinding, ...]
    branches: tuple[BranchPlan, ...]
    kind: TemplateKind

    def __len__(self) -> int:
        return len(self.branches)

    def window_plan(self, k: int) -> PromptPlan:
        """The standalone plan of branch ``k``."""
        br = self.branches[k]
        ids = np.concatenate([self.stream_ids[: br.cut], br.token_ids])
        bindings = [b for b in self.stream_bindings if b.position < br.cut]
        bindings += [SlotBinding(b.position + br.cut, b.slot, b.ref, b.entity_id) for b in br.slot_bindings]
        return PromptPlan(ids, tuple(bindings), len(ids) - 1, br.cut, self.kind)

    def subset(self, indices: Sequence[int]) -> PackedPlan:
        """Keep some branches and trim the stream to what they need."""
        branches = tuple(self.branches[i] for i in indices)
        if not branches:
            raise ValueError("empty branch subset")
        end = max(b.cut for b in branches)
        return PackedPlan(self.stream_ids[:end], tuple(b for b in self.stream_bindings if b.position < end),
                          branches, self.kind)


def _tail_ids(kind: TemplateKind, target: Interaction, vocab: Vocab, drop) -> np.ndarray:
    return tokenize(render_parts(kind, HistoryWindow((), target), drop).tail, vocab)


def pack_windows(kind, windows: Sequence[HistoryWindow], vocab: Vocab,
                 drop: Iterable[Drop | str] = ()) -> list[tuple[PackedPlan, list[int]]]:
    """Group windows by shared history prefix.

    Returns ``(plan, window_indices)`` pairs; branch ``j`` of a plan belongs
    to ``windows[window_indices[j]]``. Windows group together when one's
    history is a prefix of the longest history in the group.
    """
    kind = TemplateKind.parse(kind)
    drop = tuple(drop)
    eff_kind = _ablated_kind(kind, drop)
    groups: dict[tuple, list[int]] = {}
    for i, w in enumerate(windows):
        if not w.history:
            raise ValueError("window without history")
        first = w.history[0]
        groups.setdefault((first.student_id, first.seq_index), []).append(i)
    out = []
    for members in groups.values():
        longest = max(members, key=lambda i: len(windows[i].history))
        full = windows[longest].history
        for i in members:
            if windows[i].history != full[: len(windows[i].history)]:
                raise ValueError("windows in a group do not share a history prefix")
        parts = render_parts(kind, HistoryWindow(full, windows[longest].target), drop)
        head, sep, items, _ = tokenize_parts(parts, vocab)
        chunks, bindings, ends = [head], [], []
        offset = len(head)
        for j, (ids, it) in enumerate(zip(items, full)):
            if j:
                chunks.append(sep)
                offset += len(sep)
            bindings.extend(_item_bindings(eff_kind, ids, offset, it, j, vocab))
            chunks.append(ids)
            offset += len(ids)
            ends.append(offset)
        branches = []
        for i in members:
            w = windows[i]
            tail = _tail_ids(kind, w.target, vocab, drop)
            branches.append(BranchPlan(ends[len(w.history) - 1], tail,
                                       tuple(_item_bindings(eff_kind, tail, 0, w.target, TARGET, vocab))))
        out.append((PackedPlan(np.concatenate(chunks), tuple(bindings), tuple(branches), eff_kind), members))
    return out
