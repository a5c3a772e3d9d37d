"""Shared test oracles: finite differences, Monte Carlo probes, IDX writer."""

import struct

import numpy as np

from sensireg import nn
from sensireg.tensor import Tensor


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation normalized by the numeric gradient's scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)


def mlp_model(widths, rng, dtype=np.float64, num_classes=None):
    """Dense/ReLU stack: widths = [in, hidden..., out]."""
    specs = []
    for i in range(len(widths) - 1):
        specs.append(nn.Dense(widths[i], widths[i + 1], layer_id=f"dense{i}"))
        if i < len(widths) - 2:
            specs.append(nn.Relu(layer_id=f"relu{i}"))
    return nn.init_parameters(specs, input_shape=(widths[0],),
                              num_classes=num_classes or widths[-1],
                              rng=rng, dtype=dtype)


def linear_binary_model(w: np.ndarray, b: float, dtype=np.float32):
    """Two-class model whose logit gap is w.x + b (class 1 iff w.x + b > 0)."""
    w = np.asarray(w, dtype=dtype)
    d = w.shape[0]
    spec = nn.Dense(d, 2, layer_id="lin")
    model = nn.init_parameters([spec], input_shape=(d,), num_classes=2,
                               rng=np.random.default_rng(0), dtype=dtype)
    weight = np.zeros((d, 2), dtype=dtype)
    weight[:, 1] = w
    model.parameters["lin.weight"] = Tensor(weight, requires_grad=True)
    bias = np.zeros(2, dtype=dtype)
    bias[1] = b
    model.parameters["lin.bias"] = Tensor(bias, requires_grad=True)
    return model


def logit_deviation_probe(model, inputs: np.ndarray, radius: float,
                          n_probes: int, seed: int) -> float:
    """Independent Monte Carlo probe of mean |logit change| in the L2 ball.

    Direct re-implementation (sphere draw + two plain forwards), kept free of
    the sensitivity-report code it is used to check.
    """
    rng = np.random.default_rng(seed)
    base = nn.predict_logits(model, inputs)
    total = 0.0
    for _ in range(n_probes):
        noise = rng.standard_normal(inputs.shape)
        norms = np.sqrt((noise ** 2).reshape(len(inputs), -1).sum(axis=1))
        norms = norms.reshape((-1,) + (1,) * (inputs.ndim - 1))
        perturbed = inputs + (radius / norms) * noise
        shifted = nn.predict_logits(model, perturbed.astype(inputs.dtype))
        total += float(np.abs(shifted - base).mean())
    return total / n_probes


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def write_idx_images(path, images: np.ndarray):
    """Big-endian IDX image container (test-only writer for round trips)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())
