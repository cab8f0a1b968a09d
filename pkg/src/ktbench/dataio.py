"""Interaction-log ingestion, chronological alignment and sequence building."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

CACHE_FORMAT = "ktbench-sequences"
CACHE_VERSION = 1

REQUIRED_COLUMNS = ("SubjectID", "AssignmentID", "ProblemID", "Attempt", "ServerTimestamp", "Score")
OPTIONAL_COLUMNS = ("CodeStateID",)
STORAGE_ORDER_LABEL = "LEAKAGE-REPRODUCTION: storage order, not chronological"


class DataError(ValueError):
    """Problem with input data; the CLI maps this to exit code 2."""


class SchemaError(DataError):
    pass


class RowError(DataError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class InteractionRecord:
    subject_id: str
    assignment_id: str
    problem_id: str
    attempt_index: int
    server_timestamp: int
    correct: int
    code_ref: str | None
    storage_order: int


@dataclass(frozen=True)
class PathContextSet:
    triples: tuple[tuple[int, int, int], ...]

    def __len__(self) -> int:
        return len(self.triples)


@dataclass(frozen=True)
class DenseEmbedding:
    vector: tuple[float, ...]


@dataclass(frozen=True)
class Step:
    problem: int
    correct: int
    timestamp: int
    attempt: int = 1
    code_ref: str | None = None
    features: PathContextSet | DenseEmbedding | None = None


@dataclass(frozen=True)
class StudentSequence:
    subject_id: str
    assignment_id: str
    steps: tuple[Step, ...]
    n_problems: int

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def problems(self) -> list[int]:
        return [s.problem for s in self.steps]

    @property
    def correct(self) -> list[int]:
        return [s.correct for s in self.steps]


@dataclass
class Corpus:
    """Sequences for one assignment plus the metadata needed to rebuild them."""

    assignment_id: str
    sequences: list[StudentSequence]
    problem_ids: list[str]
    meta: dict = field(default_factory=dict)

    def __iter__(self) -> Iterator[StudentSequence]:
        return iter(self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i: int) -> StudentSequence:
        return self.sequences[i]

    @property
    def n_problems(self) -> int:
        return len(self.problem_ids)

    def subjects(self) -> list[str]:
        return [s.subject_id for s in self.sequences]

    def select(self, subjects: Iterable[str]) -> list[StudentSequence]:
        wanted = set(subjects)
        return [s for s in self.sequences if s.subject_id in wanted]


# --- MainTable --------------------------------------------------------------

def parse_timestamp(raw: str) -> int:
    """Milliseconds since the epoch from an integer string or an ISO-8601 stamp."""
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        value = float(raw)
    except ValueError:
        value = None
    if value is not None:
        if not math.isfinite(value):
            raise ValueError(f"non-finite timestamp {raw!r}")
        return int(round(value))
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


def parse_main_table(path: str | Path, columns: Mapping[str, str] | None = None,
                     score_threshold: float = 1.0) -> list[InteractionRecord]:
    """Read a MainTable CSV into records, keeping the physical row order.

    ``columns`` maps logical names (``SubjectID`` ...) to the header names used
    in the file. Correctness is ``score >= score_threshold``.
    """
    names = {c: c for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
    if columns:
        unknown = set(columns) - set(names)
        if unknown:
            raise SchemaError(f"unknown logical column(s) in mapping: {sorted(unknown)}")
        names.update(columns)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for logical in REQUIRED_COLUMNS:
            if names[logical] not in header:
                raise SchemaError(f"missing required column {names[logical]!r} (logical {logical})")
        code_col = names["CodeStateID"] if names["CodeStateID"] in header else None
        records: list[InteractionRecord] = []
        seen: set[tuple] = set()
        for i, row in enumerate(reader):
            rownum = i + 2  # 1-based, after the header
            try:
                attempt = int(row[names["Attempt"]])
            except (TypeError, ValueError):
                raise RowError(rownum, f"unparseable attempt {row[names['Attempt']]!r}") from None
            if attempt < 1:
                raise RowError(rownum, f"attempt must be >= 1, got {attempt}")
            try:
                ts = parse_timestamp(row[names["ServerTimestamp"]] or "")
            except ValueError:
                raise RowError(rownum, f"unparseable timestamp {row[names['ServerTimestamp']]!r}") from None
            try:
                score = float(row[names["Score"]])
            except (TypeError, ValueError):
                raise RowError(rownum, f"unparseable score {row[names['Score']]!r}") from None
            if not math.isfinite(score):
                raise RowError(rownum, f"non-finite score {score}")
            rec = InteractionRecord(
                subject_id=row[names["SubjectID"]],
                assignment_id=row[names["AssignmentID"]],
                problem_id=row[names["ProblemID"]],
                attempt_index=attempt,
                server_timestamp=ts,
                correct=int(score >= score_threshold),
                code_ref=(row[code_col] or None) if code_col else None,
                storage_order=i,
            )
            key = (rec.subject_id, rec.assignment_id, rec.problem_id, rec.attempt_index)
            if key in seen:
                raise RowError(rownum, f"duplicate (subject, assignment, problem, attempt) {key}")
            seen.add(key)
            records.append(rec)
    return records


def align_chronologically(records: Iterable[InteractionRecord]) -> list[InteractionRecord]:
    """Stable sort by (subject, assignment, timestamp, attempt, storage order)."""
    return sorted(records, key=lambda r: (r.subject_id, r.assignment_id, r.server_timestamp,
                                          r.attempt_index, r.storage_order))


def _by_storage(records: Iterable[InteractionRecord]) -> list[InteractionRecord]:
    return sorted(records, key=lambda r: (r.subject_id, r.assignment_id, r.storage_order))


def assignments(records: Iterable[InteractionRecord]) -> list[str]:
    return sorted({r.assignment_id for r in records})


def build_sequences(records: Sequence[InteractionRecord], L_max: int, align: bool = True,
                    truncation: str = "earliest") -> Corpus:
    """Group one assignment's records into per-student sequences of at most ``L_max`` steps.

    With ``align=False`` steps follow file storage order (the leaky pipeline);
    the corpus metadata says so. Problem indices always come from first
    appearance in the chronologically aligned corpus.
    """
    if L_max < 2:
        raise ValueError(f"L_max must be >= 2, got {L_max}")
    if truncation not in ("earliest", "latest"):
        raise ValueError(f"unknown truncation policy {truncation!r}")
    found = assignments(records)
    if len(found) > 1:
        raise DataError(f"records span multiple assignments: {found}")
    assignment_id = found[0] if found else ""

    aligned = align_chronologically(records)
    problem_index: dict[str, int] = {}
    for r in aligned:
        problem_index.setdefault(r.problem_id, len(problem_index))

    ordered = aligned if align else _by_storage(records)
    groups: dict[str, list[InteractionRecord]] = defaultdict(list)
    for r in ordered:
        groups[r.subject_id].append(r)

    n_problems = len(problem_index)
    sequences = []
    truncated = 0
    for subject in sorted(groups):
        rows = groups[subject]
        if len(rows) > L_max:
            truncated += 1
            rows = rows[:L_max] if truncation == "earliest" else rows[-L_max:]
        steps = tuple(Step(problem=problem_index[r.problem_id], correct=r.correct,
                           timestamp=r.server_timestamp, attempt=r.attempt_index,
                           code_ref=r.code_ref) for r in rows)
        sequences.append(StudentSequence(subject, assignment_id, steps, n_problems))

    meta = {
        "L_max": L_max,
        "align": bool(align),
        "order": "chronological" if align else STORAGE_ORDER_LABEL,
        "truncation": truncation,
        "truncated_sequences": truncated,
        "n_records": len(records),
        "feature_kind": None,
    }
    return Corpus(assignment_id, sequences, list(problem_index), meta)


# --- code-feature files -----------------------------------------------------

def read_path_contexts(path: str | Path) -> tuple[dict[str, int], dict[str, list[tuple[int, int, int]]]]:
    """Parse a path-context file: ``tokens N`` / ``paths M`` / ``rmax R`` then one line per code_ref."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header: dict[str, int] = {}
    for want, line in zip(("tokens", "paths", "rmax"), lines[:3]):
        parts = line.split()
        if len(parts) != 2 or parts[0] != want:
            raise SchemaError(f"path-context header: expected '{want} <int>', got {line!r}")
        header[want] = int(parts[1])
    if len(header) != 3:
        raise SchemaError("path-context file needs a 3-line header")
    table: dict[str, list[tuple[int, int, int]]] = {}
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        ref, *chunks = line.split()
        triples = []
        for chunk in chunks:
            try:
                s, p, e = (int(v) for v in chunk.split(","))
            except ValueError:
                raise RowError(lineno, f"bad path triple {chunk!r}") from None
            triples.append((s, p, e))
        table[ref] = triples
    return header, table


def write_path_contexts(path: str | Path, n_tokens: int, n_paths: int, r_max: int,
                        table: Mapping[str, Sequence[tuple[int, int, int]]]) -> None:
    Path(path).write_bytes(format_path_contexts(n_tokens, n_paths, r_max, table))


def format_path_contexts(n_tokens: int, n_paths: int, r_max: int,
                         table: Mapping[str, Sequence[tuple[int, int, int]]]) -> bytes:
    out = [f"tokens {n_tokens}", f"paths {n_paths}", f"rmax {r_max}"]
    for ref, triples in table.items():
        out.append(" ".join([ref] + [f"{s},{p},{e}" for s, p, e in triples]))
    return ("\n".join(out) + "\n").encode("utf-8")


def read_embeddings(path: str | Path) -> tuple[int, dict[str, tuple[float, ...]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or len(lines[0].split()) != 2 or lines[0].split()[0] != "dim":
        raise SchemaError("embedding file must start with 'dim D'")
    dim = int(lines[0].split()[1])
    table = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        ref, _, rest = line.partition(" ")
        try:
            vec = tuple(float(v) for v in rest.split(","))
        except ValueError:
            raise RowError(lineno, "unparseable embedding value") from None
        if len(vec) != dim:
            raise RowError(lineno, f"embedding width {len(vec)} != declared dim {dim}")
        table[ref] = vec
    return dim, table


def attach_code_features(corpus: Corpus, path_context_file: str | Path | None = None,
                         embedding_file: str | Path | None = None, r_max: int | None = None,
                         missing: str = "error") -> Corpus:
    """Attach a PathContextSet or DenseEmbedding to every step, keyed by code_ref.

    ``missing="zero"`` substitutes one all-zero triple (or a zero vector) for
    unknown code_refs instead of raising.
    """
    if (path_context_file is None) == (embedding_file is None):
        raise ValueError("give exactly one of path_context_file / embedding_file")
    if missing not in ("error", "zero"):
        raise ValueError(f"unknown missing policy {missing!r}")
    meta = dict(corpus.meta)
    n_missing = 0

    if path_context_file is not None:
        header, table = read_path_contexts(path_context_file)
        cap = header["rmax"] if r_max is None else int(r_max)
        n_tok, n_path = header["tokens"], header["paths"]
        truncated_steps = dropped = 0

        def lookup(step: Step) -> PathContextSet:
            nonlocal truncated_steps, dropped, n_missing
            triples = table.get(step.code_ref) if step.code_ref is not None else None
            if not triples:
                if missing == "error":
                    raise DataError(f"no path contexts for code_ref {step.code_ref!r}")
                n_missing += 1
                return PathContextSet(((0, 0, 0),))
            for s, p, e in triples:
                if not (0 <= s < n_tok and 0 <= e < n_tok and 0 <= p < n_path):
                    raise DataError(f"code_ref {step.code_ref!r}: triple {(s, p, e)} out of vocabulary")
            if len(triples) > cap:
                truncated_steps += 1
                dropped += len(triples) - cap
                triples = triples[:cap]
            return PathContextSet(tuple(triples))

        seqs = [replace(seq, steps=tuple(replace(st, features=lookup(st)) for st in seq.steps))
                for seq in corpus.sequences]
        meta.update(feature_kind="paths", n_tokens=n_tok, n_paths=n_path, r_max=cap,
                    truncated_feature_steps=truncated_steps, dropped_triples=dropped,
                    missing_code_refs=n_missing)
    else:
        dim, table = read_embeddings(embedding_file)

        def lookup(step: Step) -> DenseEmbedding:
            nonlocal n_missing
            vec = table.get(step.code_ref) if step.code_ref is not None else None
            if vec is None:
                if missing == "error":
                    raise DataError(f"no embedding for code_ref {step.code_ref!r}")
                n_missing += 1
                return DenseEmbedding((0.0,) * dim)
            return DenseEmbedding(vec)

        seqs = [replace(seq, steps=tuple(replace(st, features=lookup(st)) for st in seq.steps))
                for seq in corpus.sequences]
        meta.update(feature_kind="dense", d_ext=dim, missing_code_refs=n_missing)
    return Corpus(corpus.assignment_id, seqs, list(corpus.problem_ids), meta)


# --- statistics -------------------------------------------------------------

def nearest_rank(values: Sequence[int], p: float) -> int:
    if not 0 < p < 1:
        raise ValueError(f"percentile fraction must be in (0, 1), got {p}")
    if not values:
        raise DataError("empty corpus")
    ordered = sorted(values)
    return ordered[max(1, math.ceil(p * len(ordered) - 1e-12)) - 1]


def sequence_lengths(records: Iterable[InteractionRecord]) -> list[int]:
    counts: dict[tuple[str, str], int] = defaultdict(int)
    for r in records:
        counts[(r.subject_id, r.assignment_id)] += 1
    return list(counts.values())


def sequence_length_percentile(records: Iterable[InteractionRecord], p: float) -> int:
    """Nearest-rank percentile of per-student attempt counts."""
    return nearest_rank(sequence_lengths(records), p)


def length_table(records: Sequence[InteractionRecord], p: float) -> dict[str, int]:
    by_assignment: dict[str, list[InteractionRecord]] = defaultdict(list)
    for r in records:
        by_assignment[r.assignment_id].append(r)
    return {a: sequence_length_percentile(rs, p) for a, rs in sorted(by_assignment.items())}


# --- cache ------------------------------------------------------------------

def _features_to_json(f):
    if f is None:
        return None
    if isinstance(f, PathContextSet):
        return {"paths": [list(t) for t in f.triples]}
    return {"dense": list(f.vector)}


def _features_from_json(d):
    if d is None:
        return None
    if "paths" in d:
        return PathContextSet(tuple(tuple(t) for t in d["paths"]))
    return DenseEmbedding(tuple(d["dense"]))


def corpus_to_bytes(corpus: Corpus) -> bytes:
    """Canonical JSON serialisation; identical corpora give identical bytes."""
    doc = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "assignment_id": corpus.assignment_id,
        "problem_ids": corpus.problem_ids,
        "meta": corpus.meta,
        "sequences": [
            {
                "subject_id": s.subject_id,
                "steps": [[st.problem, st.correct, st.timestamp, st.attempt, st.code_ref,
                           _features_to_json(st.features)] for st in s.steps],
            }
            for s in corpus.sequences
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def corpus_from_bytes(blob: bytes) -> Corpus:
    doc = json.loads(blob.decode("utf-8"))
    if doc.get("format") != CACHE_FORMAT:
        raise DataError("not a sequence cache file")
    if doc.get("version") != CACHE_VERSION:
        raise DataError(f"unsupported sequence cache version {doc.get('version')}")
    q = len(doc["problem_ids"])
    seqs = [
        StudentSequence(
            s["subject_id"], doc["assignment_id"],
            tuple(Step(p, c, ts, a, ref, _features_from_json(f)) for p, c, ts, a, ref, f in s["steps"]),
            q,
        )
        for s in doc["sequences"]
    ]
    return Corpus(doc["assignment_id"], seqs, doc["problem_ids"], doc["meta"])


def save_corpus(corpus: Corpus, path: str | Path) -> str:
    blob = corpus_to_bytes(corpus)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_corpus(path: str | Path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes())


def corpus_hash(corpus: Corpus) -> str:
    return hashlib.sha256(corpus_to_bytes(corpus)).hexdigest()


def file_hash(*paths: str | Path | None) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is not None:
            h.update(Path(p).read_bytes())
    return h.hexdigest()
