"""Shared fixture builders (plain functions so acceptance and unit tests can both use them)."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from ktbench import dataio, synthgen
from ktbench import tensor as tn
from ktbench.dataio import InteractionRecord, PathContextSet, Step, StudentSequence
from ktbench.models import Dims, Kind, Model, ModelVariant, init_params
from ktbench.tensor import Axis, Tensor, make_rng

HEADER = "SubjectID,AssignmentID,ProblemID,Attempt,ServerTimestamp,Score,CodeStateID"

# Subject 106: attempts stored 1..7, but attempt 6 (a failure) happened before attempt 5 (a success).
FIG1_ROWS = [
    ("106", "439", "1", 1, 1_000, "0.0", "c1"),
    ("106", "439", "1", 2, 2_000, "0.0", "c2"),
    ("106", "439", "1", 3, 3_000, "0.0", "c3"),
    ("106", "439", "1", 4, 4_000, "0.0", "c4"),
    ("106", "439", "1", 5, 6_000, "1.0", "c5"),
    ("106", "439", "1", 6, 5_000, "0.0", "c6"),
    ("106", "439", "2", 1, 7_000, "1.0", "c7"),
    ("107", "439", "1", 1, 1_500, "1.0", "c8"),
    ("107", "439", "2", 1, 2_500, "0.0", "c9"),
    ("107", "439", "2", 2, 3_500, "1.0", "c10"),
]


def csv_text(rows) -> str:
    return HEADER + "\n" + "".join(",".join(str(x) for x in r) + "\n" for r in rows)


def write_fig1(directory: Path) -> Path:
    path = Path(directory) / "fig1.csv"
    path.write_text(csv_text(FIG1_ROWS), encoding="utf-8")
    return path


def fig1_records(directory: Path) -> list[InteractionRecord]:
    return dataio.parse_main_table(write_fig1(directory))


def small_generated(directory: Path, **overrides) -> dict[str, Path]:
    cfg = synthgen.GeneratorConfig(**{"n_students": 40, "n_problems": 4, "seed": 3, **overrides})
    return synthgen.generate_corpus(cfg).write(directory)


def path_corpus(files: dict[str, Path], L_max: int = 50, align: bool = True) -> dataio.Corpus:
    records = dataio.parse_main_table(files["main_table"])
    corpus = dataio.build_sequences(records, L_max, align=align)
    return dataio.attach_code_features(corpus, path_context_file=files["path_contexts"])


def dense_corpus(files: dict[str, Path], L_max: int = 50, align: bool = True) -> dataio.Corpus:
    records = dataio.parse_main_table(files["main_table"])
    corpus = dataio.build_sequences(records, L_max, align=align)
    return dataio.attach_code_features(corpus, embedding_file=files["embeddings"])


def corpus_dims(corpus: dataio.Corpus, hidden: int = 8, d_emb: int = 4) -> Dims:
    m = corpus.meta
    return Dims(corpus.n_problems, hidden=hidden, d_emb=d_emb, n_tokens=m.get("n_tokens", 0),
                n_paths=m.get("n_paths", 0), d_ext=m.get("d_ext", 0))


# --- random sequences for model-level properties ------------------------------

def random_path_sequence(rng: np.random.Generator, T: int, dims: Dims, r_max: int = 5) -> StudentSequence:
    steps = []
    for t in range(T):
        r = int(rng.integers(1, r_max + 1))
        tri = tuple((int(rng.integers(dims.n_tokens)), int(rng.integers(dims.n_paths)),
                     int(rng.integers(dims.n_tokens))) for _ in range(r))
        steps.append(Step(int(rng.integers(dims.n_problems)), int(rng.integers(2)), t, features=PathContextSet(tri)))
    return StudentSequence("s", "a", tuple(steps), dims.n_problems)


def random_dense_sequence(rng: np.random.Generator, T: int, dims: Dims) -> StudentSequence:
    steps = [Step(int(rng.integers(dims.n_problems)), int(rng.integers(2)), t,
                  features=dataio.DenseEmbedding(tuple(float(v) for v in rng.normal(size=dims.d_ext))))
             for t in range(T)]
    return StudentSequence("s", "a", tuple(steps), dims.n_problems)


def random_plain_sequence(rng: np.random.Generator, T: int, dims: Dims) -> StudentSequence:
    steps = [Step(int(rng.integers(dims.n_problems)), int(rng.integers(2)), t) for t in range(T)]
    return StudentSequence("s", "a", tuple(steps), dims.n_problems)


def random_sequence(rng, T: int, variant: ModelVariant, dims: Dims) -> StudentSequence:
    if variant.uses_paths:
        return random_path_sequence(rng, T, dims)
    if variant.uses_dense:
        return random_dense_sequence(rng, T, dims)
    return random_plain_sequence(rng, T, dims)


TINY_DIMS = Dims(n_problems=3, hidden=3, d_emb=2, n_tokens=5, n_paths=5, d_ext=3)

ALL_VARIANTS = [
    ModelVariant(Kind.DKT),
    ModelVariant(Kind.CODEDKT, Axis.PATH),
    ModelVariant(Kind.CODEDKT, Axis.PATH, w0_enabled=True),
    ModelVariant(Kind.CODEDKT, Axis.PATH, xt_mode="interaction"),
    ModelVariant(Kind.CODEDKT, Axis.TIME),
    ModelVariant(Kind.CODEDKT, Axis.TIME, w0_enabled=True),
    ModelVariant(Kind.ECKT_STYLE, Axis.PATH),
    ModelVariant(Kind.ECKT_STYLE, Axis.PATH, w0_enabled=True),
    ModelVariant(Kind.ECKT_STYLE, Axis.TIME),
]
CAUSAL_VARIANTS = [v for v in ALL_VARIANTS if v.kind is Kind.DKT or v.axis_mode is Axis.PATH]


# --- TIME-mode leakage witness -------------------------------------------------

WITNESS_CUT = 2


def leakage_witness() -> tuple[Model, StudentSequence]:
    """A time-softmax Code-DKT whose step-1..2 predictions depend on steps 3..6.

    Attention scores are made large and step-dependent (scaled W_a, distinct
    path sets per step), so the per-slot normalisation across time shifts
    visibly when later submissions change.
    """
    variant = ModelVariant(Kind.CODEDKT, Axis.TIME)
    dims = Dims(n_problems=3, hidden=6, d_emb=4, n_tokens=8, n_paths=8)
    params = init_params(variant, dims, seed=7)
    params["code.W_a"].data *= 6.0
    for name in ("code.E_start", "code.E_path", "code.E_end"):
        params[name].data *= 3.0
    triples = [
        ((1, 2, 3), (4, 5, 6)),
        ((2, 3, 4), (7, 1, 2)),
        ((5, 6, 7), (3, 3, 3)),
        ((6, 7, 1), (2, 4, 6)),
        ((7, 7, 7), (1, 1, 1)),
        ((4, 2, 5), (6, 6, 2)),
    ]
    steps = tuple(Step(t % 3, t % 2, 1000 * t, features=PathContextSet(tri)) for t, tri in enumerate(triples))
    return Model(variant, dims, params), StudentSequence("W", "A", steps, dims.n_problems)


def witness_tail_variant(seq: StudentSequence) -> StudentSequence:
    """The witness sequence with every step after the cut replaced."""
    steps = list(seq.steps)
    for t in range(WITNESS_CUT, len(steps)):
        steps[t] = replace(steps[t], correct=1 - steps[t].correct,
                           features=PathContextSet(((0, 0, 0), (1, 1, 1))))
    return replace(seq, steps=tuple(steps))


def fresh_rng(*stream: int) -> np.random.Generator:
    return make_rng(20240601, *stream)


# --- primitive gradient-check cases ---------------------------------------------

def weighted_sum(y: Tensor, seed: int = 99) -> Tensor:
    """Reduce to a scalar through fixed random weights so every output element matters."""
    w = make_rng(seed).normal(size=y.shape)
    return tn.sum(tn.mul(y, Tensor(w)))


def grad_check_scalarized(fn, **arrays_in) -> float:
    bindings = {k: Tensor(v, requires_grad=True) for k, v in arrays_in.items()}
    return tn.grad_check(tn.Graph(lambda **kw: weighted_sum(fn(**kw))), bindings)


def primitive_cases(seed: int) -> dict:
    """name -> (fn, inputs) covering every differentiable primitive."""
    r = make_rng(seed, 7)
    a34, b34 = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    w42, v4 = r.normal(size=(4, 2)), r.normal(size=4)
    x234 = r.normal(size=(2, 3, 4))
    mask = r.random((2, 3, 4)) < 0.8
    mask[..., 0] = True
    ids = r.integers(0, 5, size=(2, 3))
    labels, keep = (b34 > 0).astype(float), b34 > -0.5
    return {
        "matmul": (lambda a, w: tn.matmul(a, w), {"a": a34, "w": w42}),
        "matmul3d": (lambda a, w: tn.matmul(a, w), {"a": x234, "w": w42}),
        "add": (lambda a, b: tn.add(a, b), {"a": a34, "b": b34}),
        "bias_add": (lambda a, b: tn.add(a, b), {"a": x234, "b": v4}),
        "mul": (lambda a, b: tn.mul(a, b), {"a": a34, "b": b34}),
        "concat": (lambda a, b: tn.concat([a, b], axis=1), {"a": a34, "b": b34}),
        "stack": (lambda a, b: tn.stack([a, b], axis=1), {"a": a34, "b": b34}),
        "take": (lambda a: tn.take(a, 1, axis=1), {"a": x234}),
        "reshape": (lambda a: tn.reshape(a, (4, 3)), {"a": a34}),
        "expand_last": (lambda a: tn.expand_last(a, 3), {"a": a34}),
        "sigmoid": (lambda a: tn.sigmoid(a), {"a": a34}),
        "tanh": (lambda a: tn.tanh(a), {"a": a34}),
        "exp": (lambda a: tn.exp(a), {"a": a34}),
        "log": (lambda a: tn.log(a), {"a": np.abs(a34) + 0.5}),
        "softmax_time": (lambda a: tn.softmax_axis(a, Axis.TIME, mask), {"a": x234}),
        "softmax_path": (lambda a: tn.softmax_axis(a, Axis.PATH, mask), {"a": x234}),
        "embedding": (lambda e: tn.embedding(e, ids), {"e": r.normal(size=(5, 3))}),
        "dropout": (lambda a: tn.dropout(a, 0.4, make_rng(seed, 3)), {"a": a34}),
        "sum_axis": (lambda a: tn.sum(a, axis=1), {"a": x234}),
        "sum": (lambda a: tn.reshape(tn.sum(a), (1,)), {"a": a34}),
        "mean": (lambda a: tn.reshape(tn.mean(a), (1,)), {"a": a34}),
        "bce": (lambda p: tn.reshape(tn.bce_masked(p, labels, keep), (1,)),
                {"p": 0.05 + 0.9 / (1 + np.exp(-a34))}),
    }
