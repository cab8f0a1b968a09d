"""Synthetic learner corpora driven by Bayesian knowledge tracing.

Each (student, problem) pair is an independent two-state learner: attempts
repeat until the first success or ``max_attempts_per_problem``. Code features
are drawn from token groups tied to the learner's mastery after the attempt,
mixed with neutral tokens according to ``feature_signal``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import format_path_contexts
from .tensor import make_rng

MAIN_HEADER = ["SubjectID", "AssignmentID", "ProblemID", "Attempt", "ServerTimestamp", "Score", "CodeStateID"]
TRUTH_HEADER = ["SubjectID", "ProblemID", "Attempt", "CodeStateID", "mastered_before", "mastered_after"]
BASE_TIMESTAMP_MS = 1_546_300_800_000  # 2019-01-01T00:00:00Z


class ConfigError(ValueError):
    pass


def _per_problem(value, n: int, name: str) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        vals = (float(value),) * n
    else:
        vals = tuple(float(v) for v in value)
        if len(vals) != n:
            raise ConfigError(f"{name}: expected {n} values, got {len(vals)}")
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name}: probability {v} outside [0, 1]")
    return vals


@dataclass
class GeneratorConfig:
    n_students: int = 300
    n_problems: int = 10
    p_init: float | Sequence[float] | None = None
    p_learn: float | Sequence[float] | None = None
    p_guess: float | Sequence[float] = 0.15
    p_slip: float | Sequence[float] = 0.10
    max_attempts_per_problem: int = 8
    timestamp_gap_ms: tuple[int, int] = (5_000, 600_000)
    shuffle_rows: bool = False
    feature_signal: float = 0.5
    seed: int = 0
    assignment_id: str = "A1"
    n_tokens: int = 31
    n_paths: int = 31
    paths_per_submission: tuple[int, int] = (3, 8)
    embedding_dim: int = 8

    def resolved(self) -> dict[str, tuple[float, ...]]:
        """Per-problem probabilities after validation."""
        q = self.n_problems
        if self.p_init is None:
            init = tuple(float(v) for v in np.linspace(0.05, 0.9, q)) if q > 1 else (0.4,)
        else:
            init = self.p_init
        if self.p_learn is None:
            learn = tuple(float(v) for v in np.linspace(0.05, 0.5, q)) if q > 1 else (0.3,)
        else:
            learn = self.p_learn
        out = {
            "p_init": _per_problem(init, q, "p_init"),
            "p_learn": _per_problem(learn, q, "p_learn"),
            "p_guess": _per_problem(self.p_guess, q, "p_guess"),
            "p_slip": _per_problem(self.p_slip, q, "p_slip"),
        }
        for g, s in zip(out["p_guess"], out["p_slip"]):
            if not g < 1.0 - s:
                raise ConfigError(f"p_guess={g} must be < 1 - p_slip={1 - s}")
        return out

    def validate(self) -> None:
        if self.n_students < 1 or self.n_problems < 1:
            raise ConfigError("need at least one student and one problem")
        if self.max_attempts_per_problem < 1:
            raise ConfigError("max_attempts_per_problem must be >= 1")
        lo, hi = self.timestamp_gap_ms
        if not 1 <= lo <= hi:
            raise ConfigError(f"timestamp_gap_ms must satisfy 1 <= lo <= hi, got {self.timestamp_gap_ms}")
        if not 0.0 <= self.feature_signal <= 1.0:
            raise ConfigError("feature_signal must be in [0, 1]")
        rlo, rhi = self.paths_per_submission
        if not 1 <= rlo <= rhi:
            raise ConfigError("paths_per_submission must satisfy 1 <= lo <= hi")
        if self.n_tokens < 4 or self.n_paths < 4:
            raise ConfigError("n_tokens and n_paths must be >= 4 (id 0 is reserved)")
        self.resolved()


@dataclass
class GeneratedCorpus:
    main_table: bytes
    path_contexts: bytes
    ground_truth: bytes
    embeddings: bytes
    config: dict = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "main_table": out / "MainTable.csv",
            "path_contexts": out / "path_contexts.txt",
            "embeddings": out / "embeddings.txt",
            "ground_truth": out / "ground_truth.csv",
        }
        for key, path in files.items():
            path.write_bytes(getattr(self, key))
        return files


def _token_groups(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ids 1..n-1 into (mastered, unmastered, neutral) groups."""
    ids = np.arange(1, n)
    third = len(ids) // 3
    return ids[:third], ids[third:2 * third], ids[2 * third:]


def _csv_bytes(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def generate_corpus(cfg: GeneratorConfig) -> GeneratedCorpus:
    """Run the BKT process and render MainTable, path-context, embedding and truth files."""
    cfg.validate()
    probs = cfg.resolved()
    rng = make_rng(cfg.seed, 0)
    tok_m, tok_u, tok_n = _token_groups(cfg.n_tokens)
    path_m, path_u, path_n = _token_groups(cfg.n_paths)

    rows: list[list] = []
    truth: list[list] = []
    paths: dict[str, list[tuple[int, int, int]]] = {}
    mastery_after: list[int] = []
    for i in range(cfg.n_students):
        subject = f"S{i:04d}"
        t = BASE_TIMESTAMP_MS + int(rng.integers(0, 86_400_000))
        for j in rng.permutation(cfg.n_problems):
            j = int(j)
            mastered = bool(rng.random() < probs["p_init"][j])
            for attempt in range(1, cfg.max_attempts_per_problem + 1):
                p_correct = 1.0 - probs["p_slip"][j] if mastered else probs["p_guess"][j]
                correct = int(rng.random() < p_correct)
                before = mastered
                if not mastered:
                    mastered = bool(rng.random() < probs["p_learn"][j])
                ref = f"C{len(rows):06d}"
                r = int(rng.integers(cfg.paths_per_submission[0], cfg.paths_per_submission[1] + 1))
                triples = []
                for _ in range(r):
                    if rng.random() < cfg.feature_signal:
                        toks, pths = (tok_m, path_m) if mastered else (tok_u, path_u)
                    else:
                        toks, pths = tok_n, path_n
                    triples.append((int(rng.choice(toks)), int(rng.choice(pths)), int(rng.choice(toks))))
                paths[ref] = triples
                rows.append([subject, cfg.assignment_id, str(j + 1), attempt, t, f"{float(correct):.1f}", ref])
                truth.append([subject, str(j + 1), attempt, ref, int(before), int(mastered)])
                mastery_after.append(int(mastered))
                t += int(rng.integers(cfg.timestamp_gap_ms[0], cfg.timestamp_gap_ms[1] + 1))
                if correct:
                    break

    emb_rng = make_rng(cfg.seed, 1)
    direction = emb_rng.normal(size=cfg.embedding_dim)
    direction /= np.linalg.norm(direction)
    emb_lines = [f"dim {cfg.embedding_dim}"]
    for row, m in zip(rows, mastery_after):
        vec = cfg.feature_signal * (1.0 if m else -1.0) * direction + emb_rng.normal(scale=0.5, size=cfg.embedding_dim)
        emb_lines.append(f"{row[6]} " + ",".join(repr(float(v)) for v in vec))

    if cfg.shuffle_rows:
        order = make_rng(cfg.seed, 2).permutation(len(rows))
        rows = [rows[k] for k in order]

    r_cap = cfg.paths_per_submission[1]
    return GeneratedCorpus(
        main_table=_csv_bytes(MAIN_HEADER, rows),
        path_contexts=format_path_contexts(cfg.n_tokens, cfg.n_paths, r_cap, paths),
        ground_truth=_csv_bytes(TRUTH_HEADER, truth),
        embeddings=("\n".join(emb_lines) + "\n").encode("utf-8"),
        config=asdict(cfg),
    )


def expected_correct_rate(cfg: GeneratorConfig) -> float:
    """Expected fraction of correct attempts, by exact forward recursion over attempts."""
    probs = cfg.resolved()
    total_correct = total_attempts = 0.0
    for j in range(cfg.n_problems):
        g, s, learn = probs["p_guess"][j], probs["p_slip"][j], probs["p_learn"][j]
        # joint probability of (still attempting, mastery state) before each attempt
        known, unknown = probs["p_init"][j], 1.0 - probs["p_init"][j]
        for _ in range(cfg.max_attempts_per_problem):
            total_attempts += known + unknown
            total_correct += known * (1.0 - s) + unknown * g
            known_fail = known * s
            unknown_fail = unknown * (1.0 - g)
            known, unknown = known_fail + unknown_fail * learn, unknown_fail * (1.0 - learn)
    return total_correct / total_attempts
