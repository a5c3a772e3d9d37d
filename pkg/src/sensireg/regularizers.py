"""Robustness regularizers: neuron sensitivity and Jacobian penalties.

The sensitivity term measures, per neuron, how much activations move when
each input is displaced to a random point on the L2 sphere of radius
``ns_eps`` around it, normalized so layers and batches are comparable. Its
loss is the per-layer dot product of sensitivity and mean absolute
activation. Note the mean-activation weighting cancels algebraically
against the same factor inside the sensitivity denominator (up to the
dead-neuron stabilizer), so the loss equals the normalized sum of absolute
activation differences; both forms are kept because the per-neuron report
is useful on its own.

The Jacobian penalty estimates the mean squared Frobenius norm of the
input-to-logits map from finite differences along random unit directions;
``exact`` mode (per-class input gradients) exists for oracle checks on
small models and is not differentiable for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .nn import LOGITS_ID, Model
from .tensor import Tensor


@dataclass(frozen=True)
class NsConfig:
    """Sensitivity-term settings.

    ``layers=None`` resolves to every ReLU output plus the logits.
    """
    ns_eps: float
    n_samples: int = 5
    layers: tuple[str, ...] | None = None
    stabilizer_delta: float = 1e-12

    def __post_init__(self):
        if self.ns_eps <= 0:
            raise ValueError("ns_eps must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


@dataclass(frozen=True)
class JacobRegConfig:
    n_projections: int = 1
    fd_step: float = 1e-2
    mode: str = "finite_difference"

    def __post_init__(self):
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")
        if self.n_projections < 1:
            raise ValueError("n_projections must be at least 1")
        if self.mode not in ("finite_difference", "exact"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_ns: float = 0.0
    lambda_jacob: float = 0.0

    def __post_init__(self):
        if self.lambda_ns < 0 or self.lambda_jacob < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SensitivityReport:
    """Per-neuron sensitivity, mean |activation|, and raw difference sums.

    All entries are tensors on the gradient graph, keyed by layer id; the
    three maps share keys and per-key lengths.
    """
    layer_sensitivity: dict[str, Tensor]
    mean_activations: dict[str, Tensor]
    diff_sums: dict[str, Tensor]


@dataclass
class LossDiagnostics:
    """Raw (unweighted) values of the three loss terms."""
    ce: float
    ns: float
    jacob: float


def sensitivity_layers(model: Model) -> tuple[str, ...]:
    """Default layer set: every ReLU output plus the logits."""
    relu_ids = [s.layer_id for s in model.layers if isinstance(s, nn.Relu)]
    return tuple(relu_ids) + (LOGITS_ID,)


def compute_neural_sensitivity(model: Model, batch, cfg: NsConfig,
                               rng: np.random.Generator) -> SensitivityReport:
    """Per-neuron sensitivity of the requested layers under sphere noise.

    For each of ``n_samples`` rounds the whole batch is re-evaluated at
    per-sample sphere perturbations of radius ``ns_eps``; absolute
    activation differences are accumulated over rounds and batch rows, then
    normalized by batch * rounds * radius * layer-width * (mean |activation|
    + delta). Outputs stay on the gradient graph so the loss can train the
    model. Perturbations are fresh draws on every call.
    """
    batch_data = batch.data if isinstance(batch, Tensor) else \
        np.asarray(batch, dtype=model.dtype)
    if batch_data.ndim < 2 or batch_data.shape[0] == 0:
        raise ValueError("batch must contain at least one sample")
    layers = cfg.layers if cfg.layers is not None else sensitivity_layers(model)
    batch_size = batch_data.shape[0]

    _, base = nn.forward(model, batch_data, record=set(layers))

    diff_sums: dict[str, Tensor] = {}
    for _ in range(cfg.n_samples):
        perturbed = T.sample_sphere_batch(batch_data, cfg.ns_eps, rng)
        _, shifted = nn.forward(model, perturbed, record=set(layers))
        for layer in layers:
            delta = T.absolute(T.sub(shifted[layer], base[layer])).sum(axis=0)
            prev = diff_sums.get(layer)
            diff_sums[layer] = delta if prev is None else T.add(prev, delta)

    sensitivity: dict[str, Tensor] = {}
    mean_acts: dict[str, Tensor] = {}
    for layer in layers:
        mla = T.absolute(base[layer]).mean(axis=0)
        width = mla.size
        norm = batch_size * cfg.n_samples * cfg.ns_eps * width
        sensitivity[layer] = T.div(diff_sums[layer], T.scale(mla, norm),
                                   stabilizer=norm * cfg.stabilizer_delta)
        mean_acts[layer] = mla
    return SensitivityReport(sensitivity, mean_acts, diff_sums)


def ns_loss(report: SensitivityReport) -> Tensor:
    """Sum over layers of sensitivity . mean-activation (scalar, differentiable)."""
    total = None
    for layer, ls in report.layer_sensitivity.items():
        term = T.mul(ls, report.mean_activations[layer]).sum()
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("report has no layers")
    return total


def _unit_directions(shape, rng: np.random.Generator, dtype) -> np.ndarray:
    return T.sample_sphere_batch(np.zeros(shape, dtype=dtype), 1.0, rng)


def jacobian_reg_loss(model: Model, batch, cfg: JacobRegConfig,
                      rng: np.random.Generator) -> Tensor:
    """Estimated mean squared Frobenius norm of the input-to-logits Jacobian.

    finite_difference mode: for each projection draw a per-sample unit
    direction u and return dim(x) * mean over batch/projections of
    ||(z(x + eta*u) - z(x)) / eta||^2. The dimension factor makes the
    random projection unbiased; for linear maps the estimator is exact in
    expectation at any step size. exact mode computes per-class input
    gradients (one backward per class) and is for verification only: its
    output does not differentiate further.
    """
    batch_data = batch.data if isinstance(batch, Tensor) else \
        np.asarray(batch, dtype=model.dtype)
    if batch_data.ndim < 2 or batch_data.shape[0] == 0:
        raise ValueError("batch must contain at least one sample")
    dim = int(np.prod(batch_data.shape[1:]))

    if cfg.mode == "exact":
        return _jacobian_exact(model, batch_data, dim)

    eta = cfg.fd_step
    z0, _ = nn.forward(model, batch_data)
    total = None
    for _ in range(cfg.n_projections):
        u = _unit_directions(batch_data.shape, rng, batch_data.dtype)
        z1, _ = nn.forward(model, batch_data + u * eta)
        rate = T.scale(T.sub(z1, z0), 1.0 / eta)
        per_sample = T.square(rate).sum(axis=1)
        term = per_sample.mean()
        total = term if total is None else T.add(total, term)
    return T.scale(total, dim / cfg.n_projections)


def _jacobian_exact(model: Model, batch_data: np.ndarray, dim: int) -> Tensor:
    batch_size = batch_data.shape[0]
    x = Tensor(batch_data, requires_grad=True)
    logits, _ = nn.forward(model, x)
    acc = 0.0
    for cls in range(model.num_classes):
        mask = np.zeros(logits.shape, dtype=batch_data.dtype)
        mask[:, cls] = 1.0
        grads = T.backward(T.mul(logits, Tensor(mask)).sum())
        gx = grads.get(x)
        if gx is not None:
            acc += float((gx.astype(np.float64) ** 2).sum())
    return Tensor(np.asarray(acc / batch_size, dtype=batch_data.dtype))


def combined_loss(model: Model, batch, labels, weights: LossWeights,
                  ns_cfg: NsConfig | None, jr_cfg: JacobRegConfig | None,
                  rng: np.random.Generator) -> tuple[Tensor, LossDiagnostics]:
    """Cross-entropy plus weighted sensitivity and Jacobian terms.

    Terms with zero weight are skipped entirely, so zero weights reproduce
    plain cross-entropy exactly (and consume no randomness).
    """
    logits, _ = nn.forward(model, batch)
    loss = T.softmax_cross_entropy(logits, labels)
    ce_val = loss.item()

    ns_val = 0.0
    if weights.lambda_ns > 0:
        if ns_cfg is None:
            raise ValueError("lambda_ns > 0 requires an NsConfig")
        report = compute_neural_sensitivity(model, batch, ns_cfg, rng)
        ns = ns_loss(report)
        ns_val = ns.item()
        loss = T.add(loss, T.scale(ns, weights.lambda_ns))

    jacob_val = 0.0
    if weights.lambda_jacob > 0:
        if jr_cfg is None:
            raise ValueError("lambda_jacob > 0 requires a JacobRegConfig")
        jacob = jacobian_reg_loss(model, batch, jr_cfg, rng)
        jacob_val = jacob.item()
        loss = T.add(loss, T.scale(jacob, weights.lambda_jacob))

    return loss, LossDiagnostics(ce=ce_val, ns=ns_val, jacob=jacob_val)
