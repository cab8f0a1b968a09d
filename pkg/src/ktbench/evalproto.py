"""Seeded split, fold-0 grid search, fixed-hyperparameter cross-validation and reports."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .dataio import Corpus
from .metrics import auc  # noqa: F401  (re-exported: part of this module's surface)
from .models import Dims, Kind, ModelVariant
from .tensor import make_rng
from .training import TrainConfig, TrainingDivergence, TrainResult, evaluate_auc, train

log = logging.getLogger(__name__)

N_FOLDS = 5
TEST_FRACTION = 0.2
LR_GRID = (5e-5, 1e-4, 5e-4)
EMBEDDING_GRID = (50, 100, 150, 300, 350)
DROPOUT_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)


class ProtocolError(RuntimeError):
    """The evaluation protocol cannot proceed; the CLI maps this to exit code 3."""


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float
    d_emb: int = 16
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def build_grid(kind: Kind | str, learning_rates: Sequence[float] = LR_GRID,
               embedding_sizes: Sequence[int] = EMBEDDING_GRID,
               dropouts: Sequence[float] = DROPOUT_GRID, d_emb_fixed: int = 16,
               dropout_fixed: float = 0.0) -> list[HyperParams]:
    """Grid in enumeration order. DKT tunes the learning rate only."""
    if Kind(kind) is Kind.DKT:
        return [HyperParams(lr, d_emb_fixed, dropout_fixed) for lr in learning_rates]
    return [HyperParams(lr, e, d) for e, d, lr in itertools.product(embedding_sizes, dropouts, learning_rates)]


@dataclass(frozen=True)
class FoldPlan:
    split_seed: int
    fold_seed: int
    test_subjects: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]

    @property
    def train_subjects(self) -> tuple[str, ...]:
        return tuple(s for f in self.folds for s in f)

    def training_folds(self, i: int) -> tuple[str, ...]:
        return tuple(s for k, f in enumerate(self.folds) if k != i for s in f)

    def to_dict(self) -> dict:
        return {"split_seed": self.split_seed, "fold_seed": self.fold_seed,
                "test_subjects": list(self.test_subjects), "folds": [list(f) for f in self.folds]}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def make_fold_plan(subjects: Sequence[str], split_seed: int, fold_seed: int) -> FoldPlan:
    """80/20 subject-level split, then five round-robin folds of the training part."""
    pool = sorted(set(subjects))
    if len(pool) < 10:
        raise ProtocolError(f"need at least 10 subjects for a fold plan, got {len(pool)}")
    shuffled = [pool[i] for i in make_rng(split_seed, 11).permutation(len(pool))]
    n_test = int(round(TEST_FRACTION * len(pool)))
    test, rest = shuffled[:n_test], shuffled[n_test:]
    rest = [rest[i] for i in make_rng(fold_seed, 13).permutation(len(rest))]
    folds = tuple(tuple(rest[k::N_FOLDS]) for k in range(N_FOLDS))
    return FoldPlan(split_seed, fold_seed, tuple(test), folds)


@dataclass
class Setup:
    """Everything besides the hyperparameters that a training run needs."""

    variant: ModelVariant
    corpus: Corpus
    hidden: int = 32
    base: TrainConfig = field(default_factory=TrainConfig)

    def dims(self, hp: HyperParams) -> Dims:
        meta = self.corpus.meta
        return Dims(n_problems=self.corpus.n_problems, hidden=self.hidden, d_emb=hp.d_emb,
                    n_tokens=meta.get("n_tokens", 0) or 0, n_paths=meta.get("n_paths", 0) or 0,
                    d_ext=meta.get("d_ext", 0) or 0)

    def config(self, hp: HyperParams) -> TrainConfig:
        return replace(self.base, learning_rate=hp.learning_rate, dropout=hp.dropout)


TrainFn = Callable[..., TrainResult]


@dataclass
class GridResult:
    theta_star: HyperParams
    best_index: int
    points: list[dict]

    def to_dict(self) -> dict:
        return {"theta_star": self.theta_star.to_dict(), "best_index": self.best_index, "points": self.points}


def grid_search_fold0(grid: Sequence[HyperParams], plan: FoldPlan, setup: Setup,
                      train_fn: TrainFn = train) -> GridResult:
    """One training per grid point on folds 1-4, validated on fold 0; earliest point wins ties."""
    if not grid:
        raise ProtocolError("empty hyperparameter grid")
    train_seqs = setup.corpus.select(plan.training_folds(0))
    val_seqs = setup.corpus.select(plan.folds[0])
    points = []
    best_i, best_auc = -1, -math.inf
    for i, hp in enumerate(grid):
        entry = {"index": i, "hyperparams": hp.to_dict()}
        try:
            res = train_fn(setup.variant, setup.dims(hp), train_seqs, val_seqs, setup.config(hp))
        except TrainingDivergence as exc:
            entry.update(status="diverged", error=str(exc))
            points.append(entry)
            log.warning("grid point %d diverged: %s", i, exc)
            continue
        entry.update(status="ok", val_auc=res.best_auc, best_epoch=res.best_epoch,
                     epochs_run=res.epochs_run, stopped_reason=res.stopped_reason.value)
        points.append(entry)
        if res.best_auc > best_auc:
            best_i, best_auc = i, res.best_auc
    if best_i < 0:
        raise ProtocolError("every grid point diverged")
    return GridResult(grid[best_i], best_i, points)


@dataclass
class MetricsReport:
    fold_auc: list[float | None]
    fold_epochs: list[int | None]
    test_auc: list[float | None]
    fold_theta: list[dict]
    failed_folds: list[int] = field(default_factory=list)

    @property
    def completed(self) -> list[float]:
        return [a for a in self.fold_auc if a is not None]

    @property
    def mean(self) -> float:
        return float(np.mean(self.completed)) if self.completed else math.nan

    @property
    def std(self) -> float:
        """Sample (n-1) standard deviation over completed folds."""
        vals = self.completed
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    @property
    def test_mean(self) -> float:
        vals = [a for a in self.test_auc if a is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {
            "fold_auc": self.fold_auc, "fold_epochs": self.fold_epochs, "test_auc": self.test_auc,
            "fold_theta": self.fold_theta, "failed_folds": self.failed_folds,
            "mean": self.mean, "std": self.std, "std_kind": "sample (n-1)", "test_mean": self.test_mean,
            "incomplete": bool(self.failed_folds), "headline": "fold-validation AUC",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["fold_auc"], d["fold_epochs"], d["test_auc"], d["fold_theta"], d.get("failed_folds", []))


def run_cv(theta: HyperParams, plan: FoldPlan, setup: Setup, evaluate_test: bool = True,
           train_fn: TrainFn = train) -> MetricsReport:
    """Train with the fixed ``theta`` on each 4-fold union, validate on the held-out fold."""
    report = MetricsReport([], [], [], [])
    test_seqs = setup.corpus.select(plan.test_subjects)
    dims, cfg = setup.dims(theta), setup.config(theta)
    for i in range(N_FOLDS):
        report.fold_theta.append(theta.to_dict())
        try:
            res = train_fn(setup.variant, dims, setup.corpus.select(plan.training_folds(i)),
                           setup.corpus.select(plan.folds[i]), cfg)
        except TrainingDivergence as exc:
            log.error("fold %d failed: %s", i, exc)
            report.failed_folds.append(i)
            report.fold_auc.append(None)
            report.fold_epochs.append(None)
            report.test_auc.append(None)
            continue
        report.fold_auc.append(res.best_auc)
        report.fold_epochs.append(res.best_epoch)
        test = evaluate_auc(res.params, setup.variant, dims, test_seqs) if evaluate_test and test_seqs else None
        report.test_auc.append(test)
    if report.failed_folds:
        log.error("LOUD FLAG: mean over %d completed folds only", len(report.completed))
    return report


@dataclass
class RunManifest:
    assignment_id: str
    variant: dict
    L_max: int
    align: bool
    theta_star: dict
    theta_provenance: str
    seeds: dict
    corpus_hash: str
    truncation: str
    fold_plan_hash: str
    train_config: dict
    hidden: int
    fold_theta: list = field(default_factory=list)
    software_version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    def label(self) -> str:
        return ModelVariant(**self.variant).label

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _fmt(x: float | None) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def setting_label(m: RunManifest) -> str:
    return f"L={m.L_max} align={'on' if m.align else 'off'}"


def summary_rows(runs: Sequence[tuple[RunManifest, MetricsReport]]) -> tuple[list[str], list[list[str]]]:
    """Rows = model + setting, columns = assignments; cells are ``mean±std``."""
    columns = sorted({m.assignment_id for m, _ in runs})
    table: dict[tuple[str, str], dict[str, str]] = {}
    for m, r in runs:
        table.setdefault((m.label(), setting_label(m)), {})[m.assignment_id] = f"{_fmt(r.mean)}±{r.std:.4f}"
    header = ["Model", "Setting"] + columns
    rows = [[model, setting] + [cells.get(c, "") for c in columns] for (model, setting), cells in table.items()]
    return header, rows


def _metric_value(r: MetricsReport, metric: str) -> float:
    if metric == "val":
        return r.mean
    if metric == "test":
        return r.test_mean
    raise ValueError(f"metric must be 'val' or 'test', got {metric!r}")


def delta_rows(baseline: Sequence[tuple[RunManifest, MetricsReport]],
               other: Sequence[tuple[RunManifest, MetricsReport]],
               metric: str = "val") -> tuple[list[str], list[list[str]]]:
    """Pairs each run with its baseline (same model and assignment): value row, then a Δ row.

    Δ = other AUC - baseline AUC, signed with four decimals.  ``metric`` picks the
    fold-validation mean (the headline) or the mean test-split AUC.
    """
    base = {(m.label(), m.assignment_id): r for m, r in baseline}
    columns = sorted({m.assignment_id for m, _ in other})
    by_model: dict[tuple[str, str], dict[str, tuple[MetricsReport, MetricsReport | None]]] = {}
    for m, r in other:
        by_model.setdefault((m.label(), setting_label(m)), {})[m.assignment_id] = (r, base.get((m.label(), m.assignment_id)))
    header = ["Model", "Setting"] + columns
    rows = []
    for (model, setting), cells in by_model.items():
        values = []
        for c in columns:
            if c not in cells:
                values.append("")
            elif metric == "val":
                values.append(f"{_fmt(cells[c][0].mean)}±{cells[c][0].std:.2f}")
            else:
                values.append(_fmt(_metric_value(cells[c][0], metric)))
        rows.append([model, setting] + values)
        deltas = []
        for c in columns:
            if c in cells and cells[c][1] is not None:
                deltas.append(f"{_metric_value(cells[c][0], metric) - _metric_value(cells[c][1], metric):+.4f}")
            else:
                deltas.append("")
        rows.append([model, "Δ"] + deltas)
    return header, rows


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


MANIFEST_FILE = "manifest.json"
FOLDS_FILE = "folds.csv"
SUMMARY_FILE = "summary.csv"
METRICS_FILE = "metrics.json"


def emit_report(manifest: RunManifest, metrics: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Write manifest.json, folds.csv and summary.csv; identical inputs give identical bytes."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / MANIFEST_FILE, out / FOLDS_FILE, out / SUMMARY_FILE]
        paths[0].write_text(_dumps(manifest.to_dict()), encoding="utf-8")
        fold_rows = [[i, _fmt(a), "" if e is None else e, _fmt(t), json.dumps(th, sort_keys=True)]
                     for i, (a, e, t, th) in enumerate(zip(metrics.fold_auc, metrics.fold_epochs,
                                                            metrics.test_auc, metrics.fold_theta))]
        fold_rows.append(["mean", _fmt(metrics.mean), "", _fmt(metrics.test_mean), ""])
        fold_rows.append(["std", _fmt(metrics.std), "", "", ""])
        paths[1].write_text(_csv(["fold", "val_auc", "best_epoch", "test_auc", "theta"], fold_rows), encoding="utf-8")
        header, rows = summary_rows([(manifest, metrics)])
        paths[2].write_text(_csv(header, rows), encoding="utf-8")
    except OSError as exc:
        raise ProtocolError(f"cannot write report to {out}: {exc}") from exc
    return paths


def write_delta_table(baseline, other, path: str | Path, metric: str = "val") -> Path:
    header, rows = delta_rows(baseline, other, metric)
    Path(path).write_text(_csv(header, rows), encoding="utf-8")
    return Path(path)
