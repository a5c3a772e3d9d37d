"""Layer stacks with per-layer activation recording and checkpoint persistence.

Activation recording exists so sensitivity terms can see inside the model:
``forward`` returns the requested intermediate tensors still attached to the
gradient graph. The reserved id ``"logits"`` names the final output and is
always present in a record; multi-axis activations (conv feature maps) are
recorded flattened so each spatial position counts as one neuron.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOGITS_ID = "logits"

CHECKPOINT_MAGIC = b"SREG"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a model file is missing, corrupt, or from another version."""


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    layer_id: str


@dataclass(frozen=True)
class Relu:
    layer_id: str


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    filters: int
    kernel_h: int
    kernel_w: int
    layer_id: str


@dataclass(frozen=True)
class Flatten:
    layer_id: str


LayerSpec = Dense | Relu | Conv2D | Flatten


def _layer_output_shape(spec: LayerSpec, shape: tuple) -> tuple:
    if isinstance(spec, Dense):
        if shape != (spec.in_features,):
            raise ValueError(f"layer {spec.layer_id}: expected input ({spec.in_features},), "
                             f"got {shape}")
        return (spec.out_features,)
    if isinstance(spec, Relu):
        return shape
    if isinstance(spec, Conv2D):
        if len(shape) != 3 or shape[0] != spec.in_channels:
            raise ValueError(f"layer {spec.layer_id}: expected input "
                             f"({spec.in_channels}, H, W), got {shape}")
        _, h, w = shape
        if spec.kernel_h > h or spec.kernel_w > w:
            raise ValueError(f"layer {spec.layer_id}: kernel exceeds input {shape}")
        return (spec.filters, h - spec.kernel_h + 1, w - spec.kernel_w + 1)
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    raise TypeError(f"unknown layer spec {spec!r}")


@dataclass
class Model:
    layers: list[LayerSpec]
    parameters: dict[str, Tensor]
    num_classes: int
    input_shape: tuple

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        ids = [spec.layer_id for spec in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("layer_ids must be unique within a model")
        if LOGITS_ID in ids:
            raise ValueError(f"layer id {LOGITS_ID!r} is reserved")
        shape = self.input_shape
        for spec in self.layers:
            shape = _layer_output_shape(spec, shape)
        if shape != (self.num_classes,):
            raise ValueError(f"final layer produces {shape}, expected "
                             f"({self.num_classes},) logits")
        for spec in self.layers:
            for name, expected in _param_shapes(spec).items():
                actual = self.parameters[name].shape
                if actual != expected:
                    raise ValueError(f"parameter {name} has shape {actual}, "
                                     f"expected {expected}")

    @property
    def layer_ids(self) -> list[str]:
        return [spec.layer_id for spec in self.layers]

    @property
    def dtype(self):
        for t in self.parameters.values():
            return t.dtype
        return np.dtype(np.float32)


@dataclass
class ActivationRecord:
    """Per-layer activations from one forward pass, still on the graph."""
    per_layer: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, layer_id: str) -> Tensor:
        return self.per_layer[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.per_layer

    def layer_ids(self) -> list[str]:
        return list(self.per_layer)


def _param_shapes(spec: LayerSpec) -> dict[str, tuple]:
    if isinstance(spec, Dense):
        return {f"{spec.layer_id}.weight": (spec.in_features, spec.out_features),
                f"{spec.layer_id}.bias": (spec.out_features,)}
    if isinstance(spec, Conv2D):
        return {f"{spec.layer_id}.weight": (spec.filters, spec.in_channels,
                                            spec.kernel_h, spec.kernel_w),
                f"{spec.layer_id}.bias": (spec.filters,)}
    return {}


def _flat_view(t: Tensor) -> Tensor:
    if t.data.ndim <= 2:
        return t
    return T.reshape(t, (t.shape[0], -1))


def forward(model: Model, batch, record=frozenset()) -> tuple[Tensor, ActivationRecord]:
    """One pass through the model, recording the requested layer outputs.

    ``record`` is a set of layer ids; the returned record holds exactly those
    entries plus ``"logits"``. Recorded tensors stay on the gradient graph, so
    losses built from them differentiate through the model parameters.
    Recording never changes the computed logits.
    """
    record = set(record)
    known = set(model.layer_ids) | {LOGITS_ID}
    unknown = record - known
    if unknown:
        raise ValueError(f"unknown layer ids in record request: {sorted(unknown)}")

    if isinstance(batch, Tensor):
        x = batch
    else:
        x = Tensor(np.asarray(batch, dtype=model.dtype))
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match model input "
                         f"{model.input_shape}")

    rec = ActivationRecord()
    for spec in model.layers:
        if isinstance(spec, Dense):
            w = model.parameters[f"{spec.layer_id}.weight"]
            b = model.parameters[f"{spec.layer_id}.bias"]
            x = T.add_bias(T.matmul(x, w), b, axis=-1)
        elif isinstance(spec, Conv2D):
            w = model.parameters[f"{spec.layer_id}.weight"]
            b = model.parameters[f"{spec.layer_id}.bias"]
            x = T.add_bias(T.conv2d(x, w), b, axis=1)
        elif isinstance(spec, Relu):
            x = T.relu(x)
        elif isinstance(spec, Flatten):
            x = T.reshape(x, (x.shape[0], -1))
        if spec.layer_id in record:
            rec.per_layer[spec.layer_id] = _flat_view(x)
    rec.per_layer[LOGITS_ID] = x
    return x, rec


def predict_logits(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Plain inference logits (no recording, detached)."""
    with T.no_grad():
        logits, _ = forward(model, inputs)
    return logits.data


def predict_labels(model: Model, batch) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    if isinstance(batch, Tensor):
        batch = batch.data
    return np.argmax(predict_logits(model, batch), axis=1)


def init_parameters(specs, input_shape, num_classes: int,
                    rng: np.random.Generator, dtype=np.float32) -> Model:
    """He-initialized model: weights ~ N(0, 2/fan_in), biases zero."""
    params: dict[str, Tensor] = {}
    for spec in specs:
        if isinstance(spec, Dense):
            std = np.sqrt(2.0 / spec.in_features)
            w = rng.normal(0.0, std, size=(spec.in_features, spec.out_features))
            params[f"{spec.layer_id}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{spec.layer_id}.bias"] = Tensor(
                np.zeros(spec.out_features, dtype=dtype), requires_grad=True)
        elif isinstance(spec, Conv2D):
            fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
            std = np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, size=(spec.filters, spec.in_channels,
                                           spec.kernel_h, spec.kernel_w))
            params[f"{spec.layer_id}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{spec.layer_id}.bias"] = Tensor(
                np.zeros(spec.filters, dtype=dtype), requires_grad=True)
    return Model(list(specs), params, num_classes, tuple(input_shape))


def clone_model(model: Model) -> Model:
    params = {name: Tensor(t.data.copy(), requires_grad=True)
              for name, t in model.parameters.items()}
    return Model(list(model.layers), params, model.num_classes, model.input_shape)


# ---------------------------------------------------------------------------
# persistence: SREG | version u32 | desc_len u32 | JSON descriptor | f32 params


def _spec_to_dict(spec: LayerSpec) -> dict:
    if isinstance(spec, Dense):
        return {"kind": "dense", "id": spec.layer_id,
                "in": spec.in_features, "out": spec.out_features}
    if isinstance(spec, Relu):
        return {"kind": "relu", "id": spec.layer_id}
    if isinstance(spec, Conv2D):
        return {"kind": "conv2d", "id": spec.layer_id,
                "in_channels": spec.in_channels, "filters": spec.filters,
                "kh": spec.kernel_h, "kw": spec.kernel_w}
    if isinstance(spec, Flatten):
        return {"kind": "flatten", "id": spec.layer_id}
    raise TypeError(f"unknown layer spec {spec!r}")


def _spec_from_dict(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind == "dense":
        return Dense(d["in"], d["out"], d["id"])
    if kind == "relu":
        return Relu(d["id"])
    if kind == "conv2d":
        return Conv2D(d["in_channels"], d["filters"], d["kh"], d["kw"], d["id"])
    if kind == "flatten":
        return Flatten(d["id"])
    raise CheckpointError(f"unknown layer kind {kind!r} in checkpoint")


def _ordered_param_names(layers) -> list[str]:
    names = []
    for spec in layers:
        names.extend(_param_shapes(spec))
    return names


def save_model(model: Model, path):
    desc = json.dumps({
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": [_spec_to_dict(s) for s in model.layers],
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        for name in _ordered_param_names(model.layers):
            values = model.parameters[name].data.astype("<f4", copy=False)
            fh.write(values.tobytes())


def load_model(path) -> Model:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read model file {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    (desc_len,) = struct.unpack_from("<I", blob, 8)
    desc_end = 12 + desc_len
    if desc_end > len(blob):
        raise CheckpointError(f"{path}: truncated architecture descriptor")
    try:
        desc = json.loads(blob[12:desc_end].decode("utf-8"))
        layers = [_spec_from_dict(d) for d in desc["layers"]]
        input_shape = tuple(desc["input_shape"])
        num_classes = int(desc["num_classes"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt architecture descriptor: {exc}") from exc

    params: dict[str, Tensor] = {}
    offset = desc_end
    shapes = {}
    for spec in layers:
        shapes.update(_param_shapes(spec))
    for name in _ordered_param_names(layers):
        shape = shapes[name]
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated parameter payload at {name}")
        values = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)),
                               offset=offset).reshape(shape)
        params[name] = Tensor(values.astype(np.float32), requires_grad=True)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} unexpected trailing bytes")
    return Model(layers, params, num_classes, input_shape)
