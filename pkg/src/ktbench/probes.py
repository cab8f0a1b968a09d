"""Detectors for the two leakage routes: out-of-order rows and look-ahead attention."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import DenseEmbedding, InteractionRecord, PathContextSet, StudentSequence
from .models import Model

LEAK_THRESHOLD = 1e-9
MAX_EXAMPLES = 20


@dataclass
class AuditReport:
    total_records: int
    violations: dict[str, int]
    examples: list[dict] = field(default_factory=list)

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    @property
    def verdict(self) -> str:
        return "ALIGNED" if self.total_violations == 0 else "MISALIGNED"

    def to_dict(self) -> dict:
        return {"total_records": self.total_records, "total_violations": self.total_violations,
                "verdict": self.verdict, "violations": self.violations, "examples": self.examples}


def timestamp_audit(records: Sequence[InteractionRecord]) -> AuditReport:
    """Count adjacent pairs, per student and in the given order, whose timestamp goes backwards."""
    groups: dict[tuple[str, str], list[InteractionRecord]] = defaultdict(list)
    for r in records:
        groups[(r.subject_id, r.assignment_id)].append(r)
    violations: dict[str, int] = {}
    examples: list[dict] = []
    for (subject, assignment), rows in sorted(groups.items()):
        n = 0
        for a, b in zip(rows, rows[1:]):
            if b.server_timestamp < a.server_timestamp:
                n += 1
                if len(examples) < MAX_EXAMPLES:
                    examples.append({"subject_id": subject, "assignment_id": assignment,
                                     "problem_ids": [a.problem_id, b.problem_id],
                                     "attempts": [a.attempt_index, b.attempt_index],
                                     "timestamps": [a.server_timestamp, b.server_timestamp]})
        if n:
            violations[subject] = violations.get(subject, 0) + n
    return AuditReport(len(records), violations, examples)


@dataclass
class ProbeReport:
    cut: int
    n_trials: int
    max_delta: float
    threshold: float = LEAK_THRESHOLD

    @property
    def verdict(self) -> str:
        return "CAUSAL" if self.max_delta <= self.threshold else "LEAKY"

    def to_dict(self) -> dict:
        return {**asdict(self), "verdict": self.verdict}


def _rerandomize_tail(seq: StudentSequence, cut: int, model: Model, rng: np.random.Generator) -> StudentSequence:
    dims = model.dims
    steps = list(seq.steps)
    r_cap = max((len(s.features) for s in steps if isinstance(s.features, PathContextSet)), default=1)
    for t in range(cut, len(steps)):
        st = steps[t]
        feats = st.features
        if isinstance(feats, PathContextSet):
            tri = [feats.triples[i] for i in rng.permutation(len(feats))]
            k = int(rng.integers(1, r_cap + 1))
            tri = (tri + tri)[:k] if len(tri) < k else tri[:k]
            tri = [(int(rng.integers(dims.n_tokens)), int(rng.integers(dims.n_paths)), int(rng.integers(dims.n_tokens)))
                   if rng.random() < 0.5 else tuple(x) for x in tri]
            feats = PathContextSet(tuple(tri))
        elif isinstance(feats, DenseEmbedding):
            feats = DenseEmbedding(tuple(float(v) for v in rng.normal(scale=3.0, size=len(feats.vector))))
        steps[t] = replace(st, problem=int(rng.integers(dims.n_problems)), correct=int(rng.integers(2)),
                           features=feats)
    return replace(seq, steps=tuple(steps))


def future_perturbation_probe(model: Model, seq: StudentSequence, cut: int, n_trials: int,
                              rng: np.random.Generator) -> ProbeReport:
    """Rerandomise every step after ``cut`` and measure how far predictions at steps 1..cut move."""
    if not 1 <= cut < len(seq):
        raise ValueError(f"cut point {cut} outside [1, {len(seq) - 1}]")
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    base = model.predict(seq)[:cut]
    worst = 0.0
    for _ in range(n_trials):
        other = model.predict(_rerandomize_tail(seq, cut, model, rng))[:cut]
        worst = max(worst, float(np.max(np.abs(other - base))))
    return ProbeReport(cut, n_trials, worst)


def write_report(report: AuditReport | ProbeReport, path: str | Path) -> Path:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return Path(path)
