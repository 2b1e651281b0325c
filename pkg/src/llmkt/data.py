"""Interaction logs: loading, student-level splits, history windows, synthetic students."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_KINDS = ("native", "assist-like", "junyi-like", "nips-like")
NATIVE_HEADER = ["student_id", "seq_index", "question_id", "concept_ids", "correct", "question_text", "concept_texts"]


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Interaction:
    student_id: str
    seq_index: int
    question_id: int | None
    concept_ids: tuple[int, ...]
    correct: bool
    question_text: str | None = None
    concept_texts: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.question_id is None and not self.concept_ids:
            raise ValueError("interaction needs a question id or at least one concept id")


@dataclass(frozen=True)
class HistoryWindow:
    history: tuple[Interaction, ...]
    target: Interaction

    @property
    def label(self) -> bool:
        return self.target.correct

    @property
    def student_id(self) -> str:
        return self.target.student_id


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    valid: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def part(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "valid": list(self.valid), "test": list(self.test)}

    @classmethod
    def from_json(cls, obj: dict) -> DatasetSplit:
        return cls(tuple(obj["train"]), tuple(obj["valid"]), tuple(obj["test"]), int(obj["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> DatasetSplit:
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Dataset bundle
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Interactions grouped by student plus dense indices for every entity id."""

    by_student: dict[str, list[Interaction]]
    question_ids: list[int] = field(default_factory=list)
    concept_ids: list[int] = field(default_factory=list)
    question_text: dict[int, str] = field(default_factory=dict)
    concept_text: dict[int, str] = field(default_factory=dict)

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> Dataset:
        by_student: dict[str, list[Interaction]] = defaultdict(list)
        qids, cids = set(), set()
        qtext: dict[int, str] = {}
        ctext: dict[int, str] = {}
        for it in interactions:
            by_student[it.student_id].append(it)
            if it.question_id is not None:
                qids.add(it.question_id)
                if it.question_text:
                    qtext.setdefault(it.question_id, it.question_text)
            cids.update(it.concept_ids)
            if it.concept_texts:
                for c, t in zip(it.concept_ids, it.concept_texts):
                    ctext.setdefault(c, t)
        for items in by_student.values():
            items.sort(key=lambda x: x.seq_index)
        return cls(dict(by_student), sorted(qids), sorted(cids), qtext, ctext)

    @property
    def students(self) -> list[str]:
        return sorted(self.by_student)

    @property
    def has_question_ids(self) -> bool:
        return bool(self.question_ids)

    @property
    def has_concept_ids(self) -> bool:
        return bool(self.concept_ids)

    @property
    def has_question_text(self) -> bool:
        return bool(self.question_text)

    @property
    def has_concept_text(self) -> bool:
        return bool(self.concept_text)

    def question_index(self) -> dict[int, int]:
        return {q: i for i, q in enumerate(self.question_ids)}

    def concept_index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.concept_ids)}

    def interactions(self, students: Iterable[str] | None = None) -> list[Interaction]:
        keys = self.students if students is None else students
        return [it for s in keys for it in self.by_student.get(s, [])]

    def subset(self, students: Iterable[str]) -> Dataset:
        """Same entity tables, fewer students."""
        return Dataset({s: self.by_student[s] for s in students}, self.question_ids, self.concept_ids,
                       self.question_text, self.concept_text)


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "1.0"):
        return True
    if v in ("0", "false", "no", "0.0"):
        return False
    raise ValueError(f"not a correctness value: {value!r}")


def _parse_int_list(value: str) -> tuple[int, ...]:
    v = value.strip().strip("[]")
    if not v:
        return ()
    sep = ";" if ";" in v else ","
    return tuple(int(float(x)) for x in v.split(sep) if x.strip())


def _opt_int(value: str | None) -> int | None:
    if value is None or not value.strip():
        return None
    return int(float(value))


# column names per schema and which optional fields it must carry
_SCHEMAS = {
    "assist-like": {
        "student": "user_id", "order": "order_id", "question": "problem_id",
        "concepts": "skill_id", "correct": "correct", "concept_text": "skill_name",
        "required": ("question", "concepts", "concept_text"),
    },
    "junyi-like": {
        "student": "user_id", "order": "timestamp", "question": "problem_id",
        "correct": "correct", "required": ("question",),
    },
    "nips-like": {
        "student": "UserId", "order": "DateAnswered", "question": "QuestionId",
        "concepts": "SubjectId", "correct": "IsCorrect", "question_text": "QuestionText",
        "concept_text": "SubjectText", "required": ("question", "concepts"),
    },
}


def load_csv(path, schema_kind: str = "native") -> list[Interaction]:
    """Read an interaction log; rows missing mandatory fields are dropped with a warning."""
    if schema_kind not in SCHEMA_KINDS:
        raise ValueError(f"unknown schema {schema_kind!r}; expected one of {SCHEMA_KINDS}")
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(path, 1, "empty file") from None
        rows = list(enumerate(reader, start=2))
    if schema_kind == "native":
        out, dropped = _load_native(path, header, rows)
    else:
        out, dropped = _load_foreign(path, header, rows, schema_kind)
    if dropped:
        warnings.warn(f"{path.name}: dropped {dropped} rows with missing mandatory fields", stacklevel=2)
        log.warning("dropped %d rows from %s", dropped, path)
    return out


def _load_native(path, header, rows):
    if header != NATIVE_HEADER:
        raise CsvFormatError(path, 1, f"expected header {','.join(NATIVE_HEADER)}")
    out, dropped = [], 0
    last: dict[str, int] = {}
    for line, row in rows:
        if len(row) != len(NATIVE_HEADER):
            raise CsvFormatError(path, line, f"expected {len(NATIVE_HEADER)} fields, got {len(row)}")
        sid, seq, qid, cids, correct, qtext, ctexts = row
        try:
            seq_i = int(seq)
            q = _opt_int(qid)
            cs = _parse_int_list(cids)
            a = _parse_bool(correct)
        except ValueError as exc:
            raise CsvFormatError(path, line, str(exc)) from None
        if not sid or (q is None and not cs):
            dropped += 1
            continue
        if sid in last and seq_i <= last[sid]:
            raise CsvFormatError(path, line, f"seq_index not increasing for student {sid}")
        last[sid] = seq_i
        texts = tuple(t for t in ctexts.split(";")) if ctexts else None
        out.append(Interaction(sid, seq_i, q, cs, a, qtext or None, texts))
    return out, dropped


def _load_foreign(path, header, rows, kind):
    spec = _SCHEMAS[kind]
    col = {name: i for i, name in enumerate(header)}
    for key in ("student", "question", "correct"):
        if spec[key] not in col:
            raise CsvFormatError(path, 1, f"missing column {spec[key]!r} for schema {kind}")

    def get(row, key):
        name = spec.get(key)
        if name is None or name not in col:
            return None
        v = row[col[name]].strip()
        return v or None

    staged: dict[str, list[tuple[float, int, Interaction]]] = defaultdict(list)
    dropped = 0
    for line, row in rows:
        if len(row) != len(header):
            raise CsvFormatError(path, line, f"expected {len(header)} fields, got {len(row)}")
        values = {k: get(row, k) for k in ("student", "order", "question", "concepts", "correct",
                                             "question_text", "concept_text")}
        if values["student"] is None or values["correct"] is None or any(values[k] is None for k in spec["required"]):
            dropped += 1
            continue
        try:
            q = _opt_int(values["question"])
            cs = _parse_int_list(values["concepts"]) if values["concepts"] else ()
            a = _parse_bool(values["correct"])
            order = line if values["order"] is None else _order_key(values["order"])
        except ValueError as exc:
            raise CsvFormatError(path, line, str(exc)) from None
        ctext = None
        if values["concept_text"]:
            parts = [p.strip() for p in values["concept_text"].split(";")]
            ctext = tuple(parts)
        it = Interaction(values["student"], 0, q, cs, a, values["question_text"], ctext)
        staged[values["student"]].append((order, line, it))
    out = []
    for sid in staged:
        items = sorted(staged[sid], key=lambda t: (t[0], t[1]))
        for i, (_, _, it) in enumerate(items):
            out.append(Interaction(it.student_id, i, it.question_id, it.concept_ids, it.correct,
                                   it.question_text, it.concept_texts))
    return out, dropped


def _order_key(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        pass
    from datetime import datetime

    return datetime.fromisoformat(value.replace("Z", "+00:00")).timestamp()


def write_native_csv(path, interactions: Iterable[Interaction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NATIVE_HEADER)
        for it in interactions:
            w.writerow([
                it.student_id, it.seq_index, "" if it.question_id is None else it.question_id,
                ";".join(str(c) for c in it.concept_ids), int(it.correct), it.question_text or "",
                ";".join(it.concept_texts) if it.concept_texts else "",
            ])


# ---------------------------------------------------------------------------
# Splits and windows
# ---------------------------------------------------------------------------


def split_students(students: Sequence[str], seed: int) -> DatasetSplit:
    """8:1:1 split by student count; valid/test get floor(n/10) (at least 1), remainder to train."""
    ids = sorted(set(students))
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 students to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    k = max(1, n // 10)
    valid, test, train = shuffled[:k], shuffled[k : 2 * k], shuffled[2 * k :]
    return DatasetSplit(tuple(sorted(train)), tuple(sorted(valid)), tuple(sorted(test)), seed)


def window_histories(interactions: Iterable[Interaction], L: int) -> list[HistoryWindow]:
    """One window per interaction that has a predecessor; history keeps the latest ``L`` items."""
    if L < 1:
        raise ValueError("L must be >= 1")
    by_student: dict[str, list[Interaction]] = defaultdict(list)
    for it in interactions:
        by_student[it.student_id].append(it)
    out = []
    for sid in sorted(by_student):
        seq = sorted(by_student[sid], key=lambda x: x.seq_index)
        for t in range(1, len(seq)):
            out.append(HistoryWindow(tuple(seq[max(0, t - L) : t]), seq[t]))
    return out


# ---------------------------------------------------------------------------
# Synthetic students
# ---------------------------------------------------------------------------

CONCEPT_NAMES = [
    ("Addition", "What is {a} plus {b}?"),
    ("Subtraction", "What is {a} minus {b}?"),
    ("Multiplication", "What is {a} times {b}?"),
    ("Division", "What is {a} divided by {b}?"),
    ("Fractions", "Simplify the fraction {a} over {b}."),
    ("Decimals", "Write {a} and {b} tenths as a decimal."),
    ("Percentages", "What is {a} percent of {b}?"),
    ("Ratios", "Share {a} in the ratio {b} to one."),
    ("Negative Numbers", "Order negative {a} and negative {b}."),
    ("Exponents", "What is {a} to the power {b}?"),
    ("Linear Equations", "Solve x plus {a} equals {b}."),
    ("Area", "Find the area of a {a} by {b} rectangle."),
]


@dataclass(frozen=True)
class SynthSpec:
    n_students: int = 300
    n_questions: int = 60
    n_concepts: int = 12
    interactions_per_student: int = 100
    seed: int = 42
    learning_rate: float = 0.05

    def __post_init__(self):
        for name in ("n_students", "n_questions", "n_concepts", "interactions_per_student"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class SynthResult:
    interactions: list[Interaction]
    oracle_p: np.ndarray
    difficulty: np.ndarray
    question_concept: np.ndarray
    spec: SynthSpec

    def oracle_by_key(self) -> dict[tuple[str, int], float]:
        return {(it.student_id, it.seq_index): float(p) for it, p in zip(self.interactions, self.oracle_p)}


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def concept_name(c: int) -> str:
    base, _ = CONCEPT_NAMES[c % len(CONCEPT_NAMES)]
    level = c // len(CONCEPT_NAMES)
    return base if level == 0 else f"{base} Level {level + 1}"


def question_text(q: int, c: int) -> str:
    _, template = CONCEPT_NAMES[c % len(CONCEPT_NAMES)]
    a = 2 + (7 * q) % 19
    b = 2 + (11 * q + 3) % 13
    return template.format(a=a, b=b)


def sample_responses(rng: np.random.Generator, p) -> np.ndarray:
    """Bernoulli draws used by the generator (exposed for Monte-Carlo checks)."""
    p = np.asarray(p, dtype=np.float64)
    return rng.random(p.shape) < p


def synth_generate(spec: SynthSpec | None = None) -> SynthResult:
    """Logistic skill-minus-difficulty students whose skills grow with practice.

    Per student and concept the skill starts at N(0, 1); each question has a
    N(0, 1) difficulty and one concept. ``p(correct) = logistic(skill - difficulty)``
    and every attempt raises the practised concept's skill by ``learning_rate``.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(spec.seed)
    difficulty = rng.normal(0.0, 1.0, size=spec.n_questions)
    q_concept = rng.permutation(np.arange(spec.n_questions) % spec.n_concepts)
    texts = [question_text(q, int(q_concept[q])) for q in range(spec.n_questions)]
    interactions, oracle = [], []
    width = max(4, len(str(spec.n_students - 1)))
    for u in range(spec.n_students):
        sid = f"s{u:0{width}d}"
        skill = rng.normal(0.0, 1.0, size=spec.n_concepts)
        questions = rng.integers(0, spec.n_questions, size=spec.interactions_per_student)
        draws = rng.random(spec.interactions_per_student)
        for t, q in enumerate(questions):
            c = int(q_concept[q])
            p = float(logistic(skill[c] - difficulty[q]))
            correct = bool(draws[t] < p)
            interactions.append(Interaction(sid, t, int(q), (c,), correct, texts[q], (concept_name(c),)))
            oracle.append(p)
            skill[c] += spec.learning_rate
    return SynthResult(interactions, np.array(oracle), difficulty, q_concept, spec)


def save_synth(result: SynthResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_native_csv(out / "interactions.csv", result.interactions)
    with open(out / "oracle.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "seq_index", "p"])
        for it, p in zip(result.interactions, result.oracle_p):
            w.writerow([it.student_id, it.seq_index, repr(float(p))])
    (out / "synth_spec.json").write_text(json.dumps(asdict(result.spec), indent=1))


def load_oracle(path) -> dict[tuple[str, int], float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {(r["student_id"], int(r["seq_index"])): float(r["p"]) for r in reader}
