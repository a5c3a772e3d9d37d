"""Training loops: cross-entropy pretraining, robust retraining, lambda search.

Runs are bit-reproducible under a fixed seed: batch order comes from a
per-epoch generator seeded with (seed, epoch), and the stochastic loss terms
draw from a per-batch generator seeded with (seed, epoch, batch index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import Dataset
from .nn import Model, clone_model
from .regularizers import (JacobRegConfig, LossDiagnostics, LossWeights,
                           NsConfig, combined_loss, compute_neural_sensitivity,
                           jacobian_reg_loss, ns_loss)
from .tensor import Tensor


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite."""


class LambdaTooHighError(RuntimeError):
    """Regularizer weight drove cross-entropy to random-guess level."""


class ModelCollapsedError(RuntimeError):
    """Validation accuracy stayed near random guessing for two epochs."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    ns_cfg: NsConfig | None = None
    jr_cfg: JacobRegConfig | None = None
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    return params, state


@dataclass
class EpochStats:
    epoch: int
    ce: float
    ns_loss: float
    jacob_loss: float
    total: float
    train_acc: float
    val_acc: float


@dataclass
class TrainingRun:
    """Trained model plus the per-epoch diagnostics the CSV log carries."""
    model: Model
    history: list[EpochStats]

    @property
    def final_train_acc(self) -> float:
        return self.history[-1].train_acc if self.history else float("nan")

    @property
    def final_val_acc(self) -> float:
        return self.history[-1].val_acc if self.history else float("nan")


TRAIN_LOG_HEADER = "epoch,ce,ns_loss,jacob_loss,total,train_acc,val_acc"


def write_training_log(history, path):
    lines = [TRAIN_LOG_HEADER]
    for s in history:
        lines.append(f"{s.epoch},{s.ce!r},{s.ns_loss!r},{s.jacob_loss!r},"
                     f"{s.total!r},{s.train_acc!r},{s.val_acc!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def accuracy(model: Model, dataset: Dataset, batch_size: int = 512) -> float:
    hits = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.inputs[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        hits += int((nn.predict_labels(model, batch) == labels).sum())
    return hits / len(dataset)


def random_guess_ce(num_classes: int) -> float:
    """Cross-entropy level treated as random guessing during lambda probes."""
    return math.log2(num_classes)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _run_training(model: Model, dataset: Dataset, cfg: TrainConfig,
                  val: Dataset | None, guard_collapse: bool) -> TrainingRun:
    model = clone_model(model)
    params = model.parameters
    state = AdamState()
    history: list[EpochStats] = []
    collapse_streak = 0
    guess_level = random_guess_ce(dataset.num_classes)

    for epoch in range(cfg.epochs):
        sums = {"ce": 0.0, "ns": 0.0, "jacob": 0.0, "total": 0.0}
        seen = 0
        for i, idx in enumerate(_epoch_batches(len(dataset), cfg.batch_size,
                                               cfg.seed, epoch)):
            x = dataset.inputs[idx]
            y = dataset.labels[idx]
            rng = np.random.default_rng([cfg.seed, epoch, i])
            loss, diag = combined_loss(model, x, y, cfg.weights,
                                       cfg.ns_cfg, cfg.jr_cfg, rng)
            total = loss.item()
            if not math.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {i}")
            grads_by_tensor = T.backward(loss)
            grads = {name: grads_by_tensor.get(t) for name, t in params.items()}
            adam_step(params, grads, state, cfg.learning_rate)
            w = len(idx)
            sums["ce"] += diag.ce * w
            sums["ns"] += diag.ns * w
            sums["jacob"] += diag.jacob * w
            sums["total"] += total * w
            seen += w

        train_acc = accuracy(model, dataset)
        val_acc = accuracy(model, val) if val is not None else train_acc
        stats = EpochStats(epoch=epoch, ce=sums["ce"] / seen,
                           ns_loss=sums["ns"] / seen,
                           jacob_loss=sums["jacob"] / seen,
                           total=sums["total"] / seen,
                           train_acc=train_acc, val_acc=val_acc)
        history.append(stats)

        if guard_collapse:
            if stats.ce >= guess_level:
                raise LambdaTooHighError(
                    f"epoch {epoch}: mean CE {stats.ce:.4f} at or above the "
                    f"random-guess level {guess_level:.4f}; lambda too high")
            if val_acc < 1.5 / dataset.num_classes:
                collapse_streak += 1
                if collapse_streak >= 2:
                    raise ModelCollapsedError(
                        f"validation accuracy {val_acc:.4f} below "
                        f"{1.5 / dataset.num_classes:.4f} for two consecutive epochs")
            else:
                collapse_streak = 0

    return TrainingRun(model, history)


def pretrain(model: Model, dataset: Dataset, cfg: TrainConfig,
             val: Dataset | None = None) -> TrainingRun:
    """Plain cross-entropy training; the input model is left untouched."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    base = TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, weights=LossWeights(),
                       seed=cfg.seed)
    return _run_training(model, dataset, base, val, guard_collapse=False)


def robustify(model: Model, dataset: Dataset, cfg: TrainConfig,
              val: Dataset | None = None) -> TrainingRun:
    """Continue training a pretrained model with the combined loss.

    Aborts with LambdaTooHighError when an epoch's mean CE reaches the
    random-guess level, and with ModelCollapsedError when validation accuracy
    sits below 1.5x random guessing for two consecutive epochs. Zero weights
    degenerate to continued cross-entropy training.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return _run_training(model, dataset, cfg, val, guard_collapse=True)


# ---------------------------------------------------------------------------
# lambda selection


@dataclass
class LambdaSearchResult:
    recommended: float
    r0: float
    lambda0: float
    probes: list[tuple[float, bool]]  # (candidate, too_high)


def initial_lambda(num_classes: int, r0: float) -> float:
    """Starting weight: random-guess CE divided by the regularizer's raw size."""
    if r0 <= 0:
        raise ValueError("regularizer baseline must be positive")
    return random_guess_ce(num_classes) / r0


def _regularizer_value(model: Model, batch: np.ndarray, regularizer: str,
                       ns_cfg: NsConfig, jr_cfg: JacobRegConfig,
                       rng: np.random.Generator) -> float:
    with T.no_grad():
        if regularizer == "ns":
            report = compute_neural_sensitivity(model, batch, ns_cfg, rng)
            return ns_loss(report).item()
        return jacobian_reg_loss(model, batch, jr_cfg, rng).item()


def lambda_search(model: Model, dataset: Dataset, regularizer: str,
                  cfg: TrainConfig, val: Dataset | None = None,
                  bisections: int = 6) -> LambdaSearchResult:
    """Pick the largest regularizer weight that does not destroy training.

    Baseline R0 is the mean regularizer value over 10 random batches of the
    train (+validation) data; the starting weight is log2(C)/R0; candidates
    within one order of magnitude are then probed by training one epoch and
    classifying the candidate as too high when the epoch-mean CE reaches the
    random-guess level.
    """
    if regularizer not in ("ns", "jacobian"):
        raise ValueError(f"unknown regularizer {regularizer!r}")
    if regularizer == "ns" and cfg.ns_cfg is None:
        raise ValueError("ns search requires cfg.ns_cfg")
    if regularizer == "jacobian" and cfg.jr_cfg is None:
        raise ValueError("jacobian search requires cfg.jr_cfg")

    if val is not None:
        pool_inputs = np.concatenate([dataset.inputs, val.inputs])
    else:
        pool_inputs = dataset.inputs
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    values = []
    for _ in range(10):
        idx = rng.permutation(len(pool_inputs))[:cfg.batch_size]
        values.append(_regularizer_value(model, pool_inputs[idx], regularizer,
                                         cfg.ns_cfg, cfg.jr_cfg, rng))
    r0 = float(np.mean(values))
    if r0 <= 0:
        raise ValueError("regularizer is zero on this model (constant network?)")
    lam0 = initial_lambda(dataset.num_classes, r0)

    probes: list[tuple[float, bool]] = []

    def too_high(lam: float) -> bool:
        if regularizer == "ns":
            weights = LossWeights(lambda_ns=lam)
        else:
            weights = LossWeights(lambda_jacob=lam)
        probe_cfg = TrainConfig(learning_rate=cfg.learning_rate, epochs=1,
                                batch_size=cfg.batch_size, weights=weights,
                                ns_cfg=cfg.ns_cfg, jr_cfg=cfg.jr_cfg,
                                seed=cfg.seed)
        try:
            robustify(model, dataset, probe_cfg, val)
        except (LambdaTooHighError, ModelCollapsedError, TrainingDivergedError):
            probes.append((lam, True))
            return True
        probes.append((lam, False))
        return False

    lo, hi = lam0 / 10.0, lam0 * 10.0
    best = None
    if too_high(lam0):
        hi = lam0
    else:
        lo = lam0
        best = lam0
    for _ in range(bisections):
        mid = math.sqrt(lo * hi)
        if too_high(mid):
            hi = mid
        else:
            lo = mid
            best = max(best or 0.0, mid)
    if best is None:
        floor = lam0 / 10.0
        if too_high(floor):
            raise LambdaTooHighError(
                f"every candidate down to {floor:.6g} drove CE to random guessing")
        best = floor
    return LambdaSearchResult(recommended=best, r0=r0, lambda0=lam0, probes=probes)
