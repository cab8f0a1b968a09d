"""Seeded mini-batch training with masked next-step loss and early stopping."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .dataio import StudentSequence
from .metrics import auc
from .models import Dims, ModelVariant, Params, clone_params, forward_batch, init_params, make_batch
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"training diverged in epoch {epoch}: {message}")
        self.epoch = epoch


class StopReason(str, enum.Enum):
    PATIENCE = "PATIENCE"
    MAX_EPOCHS = "MAX_EPOCHS"


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 10
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_seed: int = 0
    shuffle_seed: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class TrainResult:
    params: Params
    best_epoch: int
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    stopped_reason: StopReason = StopReason.MAX_EPOCHS

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    @property
    def best_auc(self) -> float:
        return self.val_auc[self.best_epoch - 1]

    def log_csv(self) -> str:
        lines = ["epoch,train_loss,val_auc,best_so_far"]
        best = -np.inf
        for i, (loss, a) in enumerate(zip(self.train_loss, self.val_auc), start=1):
            best = max(best, a)
            lines.append(f"{i},{loss!r},{a!r},{best!r}")
        return "\n".join(lines) + "\n"


def batch_loss(pred: Tensor, batch) -> Tensor:
    """Mean BCE of y_t[q_{t+1}] against x_{t+1} over real (t, t+1) pairs."""
    picked = tn.sum(tn.mul(pred, Tensor(batch.next_onehot)), axis=2)
    return tn.bce_masked(picked, batch.next_correct, batch.loss_mask)


def next_step_loss(predictions: Tensor, seq: StudentSequence) -> Tensor:
    """Loss for one sequence given its ``[T, Q]`` predictions."""
    T = len(seq)
    if T < 2:
        raise ValueError("next-step loss needs at least two steps")
    if predictions.shape[0] != T:
        raise tn.ShapeError(f"predictions cover {predictions.shape[0]} steps, sequence has {T}")
    q = predictions.shape[1]
    onehot = np.zeros((T, q))
    target = np.zeros(T)
    mask = np.zeros(T, dtype=bool)
    for t in range(T - 1):
        onehot[t, seq.steps[t + 1].problem] = 1.0
        target[t] = seq.steps[t + 1].correct
        mask[t] = True
    picked = tn.sum(tn.mul(predictions, Tensor(onehot)), axis=1)
    return tn.bce_masked(picked, target, mask)


def predict_pairs(params: Params, variant: ModelVariant, dims: Dims, seqs: Sequence[StudentSequence],
                  batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (score, label) pairs y_t[q_{t+1}] / x_{t+1} for every real transition."""
    scores, labels = [], []
    for start in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[start:start + batch_size], variant, dims)
        pred = forward_batch(batch, params, variant, dims).data
        picked = (pred * batch.next_onehot).sum(axis=2)
        scores.append(picked[batch.loss_mask])
        labels.append(batch.next_correct[batch.loss_mask])
    return np.concatenate(scores), np.concatenate(labels).astype(int)


def evaluate_auc(params: Params, variant: ModelVariant, dims: Dims, seqs: Sequence[StudentSequence]) -> float:
    s, y = predict_pairs(params, variant, dims, seqs)
    return auc(s, y)


class Adam:
    def __init__(self, params: Params, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}

    def step(self, params: Params) -> None:
        c = self.cfg
        self.t += 1
        for k, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if c.optimizer == "sgd":
                p.data -= c.learning_rate * g
                continue
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / (1 - c.beta1 ** self.t)
            vhat = self.v[k] / (1 - c.beta2 ** self.t)
            p.data -= c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


def _usable(seqs: Sequence[StudentSequence]) -> list[StudentSequence]:
    return [s for s in seqs if len(s) >= 2]


def train(variant: ModelVariant, dims: Dims, train_seqs: Sequence[StudentSequence],
          val_seqs: Sequence[StudentSequence], cfg: TrainConfig,
          val_metric: Callable[[Params, int], float] | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Train from ``init_params(variant, dims, cfg.init_seed)`` and return the best-AUC snapshot.

    ``val_metric(params, epoch)`` overrides validation AUC (used by tests).
    """
    train_seqs = _usable(train_seqs)
    val_seqs = _usable(val_seqs)
    if not train_seqs or (val_metric is None and not val_seqs):
        raise ValueError("train and validation sets must be non-empty")
    params = init_params(variant, dims, cfg.init_seed)
    opt = Adam(params, cfg)
    result = TrainResult(params=clone_params(params), best_epoch=0)
    best = -np.inf
    stale = 0
    n = len(train_seqs)
    for epoch in range(1, cfg.max_epochs + 1):
        order = tn.make_rng(cfg.shuffle_seed, epoch).permutation(n)
        losses, weights = [], []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            chunk = [train_seqs[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(chunk, variant, dims)
            rng = tn.make_rng(cfg.init_seed, epoch, bi) if cfg.dropout > 0 else None
            for p in params.values():
                p.zero_grad()
            try:
                loss = batch_loss(forward_batch(batch, params, variant, dims, rng, cfg.dropout), batch)
                tn.backward(loss)
                opt.step(params)
                if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                    raise NumericError("parameters became non-finite after the update")
            except NumericError as exc:
                raise TrainingDivergence(epoch, f"batch {bi}: {exc}") from exc
            losses.append(loss.item())
            weights.append(int(batch.loss_mask.sum()))
        epoch_loss = float(np.average(losses, weights=weights))
        score = val_metric(params, epoch) if val_metric else evaluate_auc(params, variant, dims, val_seqs)
        result.train_loss.append(epoch_loss)
        result.val_auc.append(float(score))
        log.debug("epoch %d loss %.5f val_auc %.5f", epoch, epoch_loss, score)
        if score > best:
            best = score
            stale = 0
            result.best_epoch = epoch
            result.params = clone_params(params)
        else:
            stale += 1
            if stale >= cfg.patience:
                result.stopped_reason = StopReason.PATIENCE
                break
    if log_path is not None:
        Path(log_path).write_text(result.log_csv(), encoding="utf-8")
    return result
