"""Dataset ingestion, preprocessing and cross-validation splits.

Input files are JSON lines.

interactions, one student per line::

    {"student_id": "s1", "question_ids": [..], "concept_ids": [..],
     "responses": [..], "timestamps": [..]}

questions, one question per line (optionally concept-name lines)::

    {"question_id": 7, "routes": [[0, 2, 5], [0, 3, 9]]}
    {"concept_id": 5, "name": "fractions"}
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .relevance import KCHierarchy, KCRoute, RouteTable, strip_universal_root

log = logging.getLogger(__name__)

PAD = -1
MAX_LEN = 200
MIN_INTERACTIONS = 3
ARTIFACT_VERSION = 1
FIELDS = ("question_ids", "concept_ids", "responses", "timestamps")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    question_id: int
    concept_id: int
    response: int
    timestamp: int


@dataclass
class StudentRecord:
    student_id: str
    interactions: list[Interaction]

    def __len__(self) -> int:
        return len(self.interactions)


@dataclass
class StudentSequence:
    """A student's (expanded, truncated) history padded to ``max_len`` with -1."""
    student_id: str
    interactions: list[Interaction]
    max_len: int = MAX_LEN
    questions: np.ndarray = field(init=False, repr=False)
    concepts: np.ndarray = field(init=False, repr=False)
    responses: np.ndarray = field(init=False, repr=False)
    valid_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.interactions)
        if n > self.max_len:
            raise DataError(f"student {self.student_id}: {n} interactions exceed max length {self.max_len}")
        self.questions = np.full(self.max_len, PAD, dtype=np.int64)
        self.concepts = np.full(self.max_len, PAD, dtype=np.int64)
        self.responses = np.full(self.max_len, PAD, dtype=np.int64)
        for i, it in enumerate(self.interactions):
            self.questions[i] = it.question_id
            self.concepts[i] = it.concept_id
            self.responses[i] = it.response
        self.valid_mask = np.zeros(self.max_len, dtype=bool)
        self.valid_mask[:n] = True

    def __len__(self) -> int:
        return len(self.interactions)

    def record(self) -> StudentRecord:
        return StudentRecord(self.student_id, list(self.interactions))


@dataclass
class LoadReport:
    students: int = 0
    interactions_read: int = 0
    dropped_missing: int = 0
    diagnostics: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- loading


def _int_or_none(v):
    if v is None or isinstance(v, bool):
        return None
    if isinstance(v, int):
        return v
    if isinstance(v, float) and v.is_integer():
        return int(v)
    if isinstance(v, str) and v.strip().lstrip("-").isdigit():
        return int(v)
    return None


def _json_lines(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_questions(path: str | Path) -> tuple[RouteTable, KCHierarchy]:
    path = Path(path)
    table: RouteTable = {}
    names: dict[int, str] = {}
    for lineno, obj in _json_lines(path):
        if "question_id" in obj:
            qid = _int_or_none(obj["question_id"])
            if qid is None or qid < 0:
                raise DataError(f"{path}:{lineno}: bad question_id {obj['question_id']!r}")
            routes = obj.get("routes") or []
            try:
                table[qid] = [KCRoute(qid, tuple(int(c) for c in r)) for r in routes]
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad routes ({exc})") from None
        elif "concept_id" in obj:
            names[int(obj["concept_id"])] = str(obj.get("name", ""))
        else:
            raise DataError(f"{path}:{lineno}: line has neither question_id nor concept_id")
    table = strip_universal_root(table)
    hierarchy = KCHierarchy.from_routes((r.route for rs in table.values() for r in rs), names)
    return table, hierarchy


def load_interactions(path: str | Path) -> tuple[list[StudentRecord], LoadReport]:
    path = Path(path)
    report = LoadReport()
    records: list[StudentRecord] = []
    for lineno, obj in _json_lines(path):
        arrays = [obj.get(f) for f in FIELDS]
        present = [a for a in arrays if isinstance(a, list)]
        n = max((len(a) for a in present), default=0)
        report.interactions_read += n
        sid = obj.get("student_id")
        if sid is None or sid == "":
            report.dropped_missing += n
            report.diagnostics.append(f"{path}:{lineno}: missing student_id, dropped {n} interactions")
            continue
        if len(present) < len(FIELDS) or any(len(a) != n for a in present):
            report.dropped_missing += n
            report.diagnostics.append(f"{path}:{lineno}: missing or ragged field arrays, dropped {n} interactions")
            continue
        kept = []
        for i in range(n):
            q, c, r, ts = (_int_or_none(a[i]) for a in arrays)
            if q is None or c is None or r is None or ts is None or q < 0 or c < 0 or r not in (0, 1):
                report.dropped_missing += 1
                report.diagnostics.append(f"{path}:{lineno}: interaction {i} incomplete or invalid, dropped")
                continue
            kept.append(Interaction(q, c, r, ts))
        kept.sort(key=lambda it: it.timestamp)
        records.append(StudentRecord(str(sid), kept))
    report.students = len(records)
    for msg in report.diagnostics[:20]:
        log.warning(msg)
    return records, report


def load_dataset(interactions_path, questions_path) -> tuple[list[StudentRecord], RouteTable, LoadReport]:
    table, _ = load_questions(questions_path)
    records, report = load_interactions(interactions_path)
    return records, table, report


# ---------------------------------------------------------------- preprocessing


def filter_short(records: Sequence, min_interactions: int = MIN_INTERACTIONS) -> list:
    return [r for r in records if len(r.interactions) >= min_interactions]


def sentinel_concept(route_table: RouteTable) -> int:
    """Concept id reserved for questions without routes: one past the largest known id."""
    ids = [c for rs in route_table.values() for r in rs for c in r.route]
    return max(ids) + 1 if ids else 0


def expand_to_kc(record, route_table: RouteTable, sentinel: int | None = None) -> StudentRecord:
    """One entry per leaf concept of each question, sharing response and timestamp.

    Consecutive entries with the same question and timestamp are treated as
    one attempt, so expanding an already expanded record changes nothing.
    """
    sentinel = sentinel_concept(route_table) if sentinel is None else sentinel
    out: list[Interaction] = []
    its = record.interactions
    i = 0
    while i < len(its):
        it = its[i]
        j = i + 1
        while j < len(its) and its[j].question_id == it.question_id and its[j].timestamp == it.timestamp:
            j += 1
        leaves = list(dict.fromkeys(r.leaf for r in route_table.get(it.question_id, [])))
        if not leaves:
            log.info("question %d has no concepts; using sentinel concept %d", it.question_id, sentinel)
            leaves = [sentinel]
        out.extend(Interaction(it.question_id, c, it.response, it.timestamp) for c in leaves)
        i = j
    return StudentRecord(record.student_id, out)


def truncate_pad(record, max_len: int = MAX_LEN) -> StudentSequence:
    """Keep the most recent ``max_len`` entries and pad with -1."""
    return StudentSequence(record.student_id, list(record.interactions[-max_len:]), max_len)


@dataclass
class PreprocessReport:
    input_interactions: int = 0
    dropped_missing: int = 0
    dropped_short: int = 0
    expanded_added: int = 0
    truncated: int = 0
    output_interactions: int = 0
    students_in: int = 0
    students_out: int = 0

    def balanced(self) -> bool:
        return (self.input_interactions - self.dropped_missing - self.dropped_short
                + self.expanded_added - self.truncated) == self.output_interactions


def preprocess(records: Sequence, route_table: RouteTable, *, max_len: int = MAX_LEN,
               min_interactions: int = MIN_INTERACTIONS,
               load_report: LoadReport | None = None) -> tuple[list[StudentSequence], PreprocessReport]:
    rep = PreprocessReport()
    rep.students_in = len(records)
    rep.input_interactions = sum(len(r.interactions) for r in records)
    if load_report is not None:
        rep.input_interactions += load_report.dropped_missing
        rep.dropped_missing = load_report.dropped_missing
    kept = filter_short(records, min_interactions)
    rep.dropped_short = sum(len(r.interactions) for r in records) - sum(len(r.interactions) for r in kept)
    sentinel = sentinel_concept(route_table)
    out = []
    for r in kept:
        ex = expand_to_kc(r, route_table, sentinel)
        rep.expanded_added += len(ex.interactions) - len(r.interactions)
        seq = truncate_pad(ex, max_len)
        rep.truncated += len(ex.interactions) - len(seq.interactions)
        out.append(seq)
    rep.output_interactions = sum(len(s) for s in out)
    rep.students_out = len(out)
    return out, rep


# ---------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    """Indices into the sequence list: a held-out test set and 5 folds over the rest."""
    test: list[int]
    folds: list[list[int]]
    seed: int

    def train_val(self, k: int) -> tuple[list[int], list[int]]:
        train = [i for j, f in enumerate(self.folds) if j != k for i in f]
        return train, list(self.folds[k])


def make_splits(sequences: Sequence, seed: int, n_folds: int = 5, test_fraction: float = 0.2) -> DatasetSplit:
    n = len(sequences)
    if n < 2 * n_folds:
        raise DataError(f"need at least {2 * n_folds} sequences to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(n * test_fraction)
    test = sorted(int(i) for i in order[:n_test])
    folds = [sorted(int(i) for i in part) for part in np.array_split(order[n_test:], n_folds)]
    return DatasetSplit(test, folds, seed)


# ---------------------------------------------------------------- artifacts


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


@dataclass
class Vocab:
    num_questions: int
    num_concepts: int

    @classmethod
    def from_data(cls, sequences: Sequence[StudentSequence], route_table: RouteTable) -> "Vocab":
        qmax = max([max(route_table, default=-1)] + [int(s.questions.max()) for s in sequences])
        cmax = max([sentinel_concept(route_table)] + [int(s.concepts.max()) for s in sequences])
        return cls(qmax + 1, cmax + 1)


def save_artifact(path, sequences: Sequence[StudentSequence], route_table: RouteTable, split: DatasetSplit,
                  report: PreprocessReport, meta: dict) -> str:
    """Write preprocessed sequences, routes and split as one JSON document; returns its sha256."""
    doc = {
        "version": ARTIFACT_VERSION,
        "meta": meta,
        "report": asdict(report),
        "split": asdict(split),
        "routes": {str(q): [list(r.route) for r in rs] for q, rs in sorted(route_table.items())},
        "sequences": [
            {"student_id": s.student_id, "max_len": s.max_len,
             "interactions": [[it.question_id, it.concept_id, it.response, it.timestamp] for it in s.interactions]}
            for s in sequences
        ],
    }
    body = json.dumps(doc, sort_keys=True).encode()
    digest = hashlib.sha256(body).hexdigest()
    Path(path).write_bytes(body)
    Path(str(path) + ".sha256").write_text(digest + "\n")
    return digest


def load_artifact(path) -> tuple[list[StudentSequence], RouteTable, DatasetSplit, dict]:
    body = Path(path).read_bytes()
    digest_file = Path(str(path) + ".sha256")
    if digest_file.exists() and digest_file.read_text().strip() != hashlib.sha256(body).hexdigest():
        raise DataError(f"{path}: content hash mismatch")
    doc = json.loads(body)
    if doc.get("version") != ARTIFACT_VERSION:
        raise DataError(f"{path}: unsupported artifact version {doc.get('version')}")
    table = {int(q): [KCRoute(int(q), tuple(r)) for r in rs] for q, rs in doc["routes"].items()}
    seqs = [StudentSequence(s["student_id"], [Interaction(*row) for row in s["interactions"]], s["max_len"])
            for s in doc["sequences"]]
    sp = doc["split"]
    return seqs, table, DatasetSplit(sp["test"], sp["folds"], sp["seed"]), doc
