"""DKT and code-feature variants built on :mod:`ktbench.tensor`.

Every variant is an LSTM over the one-hot (problem, correctness) encoding.
Code-feature variants concatenate a per-step code vector to that input. The
code vector comes from score-attended aggregation over a set of path
representations ``[start; path; end; x_t]``. Normalising the scores over the
PATH axis keeps each step self-contained. Normalising over the TIME axis
mixes in scores from later submissions, which is the leaky configuration kept
here for reproduction and probing.
"""
from __future__ import annotations

import enum
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .dataio import DenseEmbedding, PathContextSet, Step, StudentSequence
from .tensor import Axis, Tensor

CHECKPOINT_FORMAT = "ktbench-checkpoint"
CHECKPOINT_VERSION = 1

GATES = ("i", "f", "o", "g")


class Kind(str, enum.Enum):
    DKT = "dkt"
    CODEDKT = "codedkt"
    ECKT_STYLE = "eckt"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariant:
    kind: Kind = Kind.DKT
    axis_mode: Axis = Axis.PATH
    w0_enabled: bool = False
    fusion: str = "concat_input"
    xt_mode: str = "correctness"  # or "interaction" (2Q one-hot inside each path representation)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "axis_mode", Axis(self.axis_mode))
        if self.fusion != "concat_input":
            raise ModelError(f"unsupported fusion {self.fusion!r}")
        if self.xt_mode not in ("correctness", "interaction"):
            raise ModelError(f"unknown xt_mode {self.xt_mode!r}")

    @property
    def uses_paths(self) -> bool:
        return self.kind is Kind.CODEDKT

    @property
    def uses_dense(self) -> bool:
        return self.kind is Kind.ECKT_STYLE

    @property
    def label(self) -> str:
        if self.kind is Kind.DKT:
            return "DKT"
        name = "CodeDKT" if self.kind is Kind.CODEDKT else "ECKT-style"
        if self.axis_mode is Axis.TIME:
            return f"{name} time-softmax" + ("+W0" if self.w0_enabled else "")
        return f"{name} CRect" + ("+" if self.w0_enabled else "")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "axis_mode": self.axis_mode.value, "w0_enabled": self.w0_enabled,
                "fusion": self.fusion, "xt_mode": self.xt_mode}


@dataclass(frozen=True)
class Dims:
    n_problems: int
    hidden: int = 32
    d_emb: int = 16
    n_tokens: int = 0
    n_paths: int = 0
    d_ext: int = 0

    def xt_width(self, variant: ModelVariant) -> int:
        return 2 if variant.xt_mode == "correctness" else 2 * self.n_problems

    def path_width(self, variant: ModelVariant) -> int:
        """Width of one path representation (input width of the attention vector)."""
        if variant.uses_paths:
            return 3 * self.d_emb + self.xt_width(variant)
        if variant.uses_dense:
            return self.d_ext + self.xt_width(variant)
        return 0

    def code_width(self, variant: ModelVariant) -> int:
        if variant.kind is Kind.DKT:
            return 0
        return self.d_emb if variant.w0_enabled else self.path_width(variant)

    def input_width(self, variant: ModelVariant) -> int:
        return 2 * self.n_problems + self.code_width(variant)


Params = dict[str, Tensor]


def init_params(variant: ModelVariant, dims: Dims, seed: int) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation from a keyed RNG."""
    if dims.n_problems < 1 or dims.hidden < 1:
        raise ModelError("n_problems and hidden must be positive")
    if variant.uses_paths and (dims.d_emb < 1 or dims.n_tokens < 1 or dims.n_paths < 1):
        raise ModelError("path variant needs d_emb, n_tokens and n_paths > 0")
    if variant.uses_dense and (dims.d_ext < 1 or (variant.w0_enabled and dims.d_emb < 1)):
        raise ModelError("dense variant needs d_ext > 0 (and d_emb > 0 with W0)")
    rng = tn.make_rng(seed, 0x1517)
    shapes: list[tuple[str, tuple[int, ...], int]] = []
    din, h = dims.input_width(variant), dims.hidden
    for g in GATES:
        shapes.append((f"lstm.W_{g}", (din + h, h), din + h))
        shapes.append((f"lstm.b_{g}", (h,), din + h))
    shapes.append(("out.W", (h, dims.n_problems), h))
    shapes.append(("out.b", (dims.n_problems,), h))
    we = dims.path_width(variant)
    if variant.uses_paths:
        shapes.append(("code.E_start", (dims.n_tokens, dims.d_emb), dims.d_emb))
        shapes.append(("code.E_path", (dims.n_paths, dims.d_emb), dims.d_emb))
        shapes.append(("code.E_end", (dims.n_tokens, dims.d_emb), dims.d_emb))
    if variant.kind is not Kind.DKT:
        shapes.append(("code.W_a", (we, 1), we))
        if variant.w0_enabled:
            shapes.append(("code.W_0", (we, dims.d_emb), we))
    params = {}
    for name, shape, fan_in in shapes:
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return params


def zero_params(variant: ModelVariant, dims: Dims) -> Params:
    return {k: Tensor(np.zeros(v.shape), requires_grad=True) for k, v in init_params(variant, dims, 0).items()}


def param_hash(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def clone_params(params: Params) -> Params:
    return {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}


# --- batching ---------------------------------------------------------------

@dataclass
class Batch:
    """Padded arrays for a list of sequences; ``mask[b, t]`` marks real steps."""

    onehot: np.ndarray        # [B, T, 2Q]
    xt: np.ndarray            # [B, T, xw]
    mask: np.ndarray          # [B, T] bool
    next_onehot: np.ndarray   # [B, T, Q]: problem at t+1
    next_correct: np.ndarray  # [B, T]
    loss_mask: np.ndarray     # [B, T] bool: t+1 is a real step
    path_ids: np.ndarray | None = None   # [B, T, R, 3]
    path_mask: np.ndarray | None = None  # [B, T, R] bool
    dense: np.ndarray | None = None      # [B, T, d_ext]

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


def make_batch(seqs: Sequence[StudentSequence], variant: ModelVariant, dims: Dims) -> Batch:
    if not seqs:
        raise ModelError("empty batch")
    q = dims.n_problems
    B, T = len(seqs), max(len(s) for s in seqs)
    onehot = np.zeros((B, T, 2 * q))
    xt = np.zeros((B, T, dims.xt_width(variant)))
    mask = np.zeros((B, T), dtype=bool)
    next_onehot = np.zeros((B, T, q))
    next_correct = np.zeros((B, T))
    loss_mask = np.zeros((B, T), dtype=bool)
    for b, seq in enumerate(seqs):
        for t, st in enumerate(seq.steps):
            if not 0 <= st.problem < q:
                raise ModelError(f"problem index {st.problem} outside [0, {q})")
            onehot[b, t, st.problem + q * st.correct] = 1.0
            if variant.xt_mode == "correctness":
                xt[b, t, st.correct] = 1.0
            else:
                xt[b, t, st.problem + q * st.correct] = 1.0
            mask[b, t] = True
            if t + 1 < len(seq):
                nxt = seq.steps[t + 1]
                next_onehot[b, t, nxt.problem] = 1.0
                next_correct[b, t] = nxt.correct
                loss_mask[b, t] = True
    batch = Batch(onehot, xt, mask, next_onehot, next_correct, loss_mask)
    if variant.uses_paths:
        R = 1
        for seq in seqs:
            for st in seq.steps:
                if not isinstance(st.features, PathContextSet) or len(st.features) < 1:
                    raise ModelError(f"{seq.subject_id}: CODEDKT needs a non-empty PathContextSet on every step")
                R = max(R, len(st.features))
        ids = np.zeros((B, T, R, 3), dtype=np.int64)
        pmask = np.zeros((B, T, R), dtype=bool)
        for b, seq in enumerate(seqs):
            for t, st in enumerate(seq.steps):
                tri = np.asarray(st.features.triples, dtype=np.int64)
                ids[b, t, :len(tri)] = tri
                pmask[b, t, :len(tri)] = True
        if ids.size and (ids[..., [0, 2]].max() >= dims.n_tokens or ids[..., 1].max() >= dims.n_paths):
            raise ModelError("path-context id outside the model vocabulary")
        batch.path_ids, batch.path_mask = ids, pmask
    if variant.uses_dense:
        dense = np.zeros((B, T, dims.d_ext))
        for b, seq in enumerate(seqs):
            for t, st in enumerate(seq.steps):
                if not isinstance(st.features, DenseEmbedding) or len(st.features.vector) != dims.d_ext:
                    raise ModelError(f"{seq.subject_id}: ECKT_STYLE needs a {dims.d_ext}-wide DenseEmbedding")
                dense[b, t] = st.features.vector
        batch.dense = dense
        batch.path_mask = mask[:, :, None].copy()
    return batch


# --- forward ----------------------------------------------------------------

def attention_weights(scores: Tensor, mask: np.ndarray, axis: Axis) -> Tensor:
    """Normalise ``[B, T, R]`` scores; padded paths and padded steps never receive weight."""
    return tn.softmax_axis(scores, axis, mask=mask)


def code_vectors(batch: Batch, params: Params, variant: ModelVariant, dims: Dims,
                 return_alpha: bool = False):
    """Per-step code vectors ``[B, T, d_code]`` (and the attention weights)."""
    B, T = batch.size
    if variant.uses_paths:
        ids = batch.path_ids
        R = ids.shape[2]
        parts = [
            tn.embedding(params["code.E_start"], ids[..., 0]),
            tn.embedding(params["code.E_path"], ids[..., 1]),
            tn.embedding(params["code.E_end"], ids[..., 2]),
            Tensor(np.repeat(batch.xt[:, :, None, :], R, axis=2)),
        ]
    else:
        R = 1
        parts = [Tensor(batch.dense[:, :, None, :]), Tensor(batch.xt[:, :, None, :])]
    reps = tn.concat(parts, axis=3)                                   # [B, T, R, we]
    scores = tn.reshape(tn.matmul(reps, params["code.W_a"]), (B, T, R))
    mask = batch.path_mask & batch.mask[:, :, None]
    if variant.axis_mode is Axis.TIME and T == 1:
        warnings.warn("time-axis attention over a single step; weights are trivially 1", RuntimeWarning,
                      stacklevel=3)
    alpha = attention_weights(scores, mask, variant.axis_mode)
    proj = tn.matmul(reps, params["code.W_0"]) if variant.w0_enabled else reps
    width = proj.shape[-1]
    v = tn.sum(tn.mul(tn.expand_last(alpha, width), proj), axis=2)  # [B, T, d_code]
    return (v, alpha) if return_alpha else v


def forward_batch(batch: Batch, params: Params, variant: ModelVariant, dims: Dims,
                  rng: np.random.Generator | None = None, dropout: float = 0.0) -> Tensor:
    """Predictions ``[B, T, Q]``; row t predicts correctness on every problem at step t+1."""
    B, T = batch.size
    inputs = Tensor(batch.onehot)
    if variant.kind is not Kind.DKT:
        inputs = tn.concat([inputs, code_vectors(batch, params, variant, dims)], axis=2)
    if inputs.shape[-1] != dims.input_width(variant):
        raise ModelError(f"input width {inputs.shape[-1]} != expected {dims.input_width(variant)}")
    H = dims.hidden
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    hs = []
    for t in range(T):
        hx = tn.concat([tn.take(inputs, t, axis=1), h], axis=1)
        i = tn.sigmoid(tn.add(tn.matmul(hx, params["lstm.W_i"]), params["lstm.b_i"]))
        f = tn.sigmoid(tn.add(tn.matmul(hx, params["lstm.W_f"]), params["lstm.b_f"]))
        o = tn.sigmoid(tn.add(tn.matmul(hx, params["lstm.W_o"]), params["lstm.b_o"]))
        g = tn.tanh(tn.add(tn.matmul(hx, params["lstm.W_g"]), params["lstm.b_g"]))
        c = tn.add(tn.mul(f, c), tn.mul(i, g))
        h = tn.mul(o, tn.tanh(c))
        hs.append(h)
    states = tn.dropout(tn.stack(hs, axis=1), dropout, rng)
    return tn.sigmoid(tn.add(tn.matmul(states, params["out.W"]), params["out.b"]))


def dkt_forward(seq: StudentSequence, params: Params, variant: ModelVariant, dims: Dims,
                rng: np.random.Generator | None = None, dropout: float = 0.0) -> Tensor:
    """Single-sequence predictions ``[T, Q]``."""
    batch = make_batch([seq], variant, dims)
    out = forward_batch(batch, params, variant, dims, rng, dropout)
    return tn.take(out, 0, axis=0)


def encode_paths(paths: PathContextSet, correct: int, params: Params, variant: ModelVariant,
                 dims: Dims, problem: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Code vector and attention weights for one submission in isolation."""
    if len(paths) < 1:
        raise ModelError("empty path set")
    seq = StudentSequence("_", "_", (Step(problem, correct, 0, features=paths),), dims.n_problems)
    batch = make_batch([seq], variant, dims)
    v, alpha = code_vectors(batch, params, variant, dims, return_alpha=True)
    return v.data[0, 0], alpha.data[0, 0]


@dataclass
class Model:
    variant: ModelVariant
    dims: Dims
    params: Params

    def predict(self, seq: StudentSequence) -> np.ndarray:
        return dkt_forward(seq, self.params, self.variant, self.dims).data

    def predict_batch(self, seqs: Sequence[StudentSequence]) -> np.ndarray:
        return forward_batch(make_batch(seqs, self.variant, self.dims), self.params, self.variant, self.dims).data


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str | Path, model: Model, seed: int | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": model.variant.to_dict(),
        "dims": asdict(model.dims),
        "seed": seed,
        "extra": extra or {},
        "params": {k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
                   for k, v in sorted(model.params.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    params = {k: Tensor(np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]), requires_grad=True)
              for k, v in doc["params"].items()}
    model = Model(ModelVariant(**doc["variant"]), Dims(**doc["dims"]), params)
    return model, {"seed": doc["seed"], "extra": doc["extra"]}
