"""Declarative model specs, deterministic initialization, forward execution
and binary checkpoints.

Layer vocabulary: dense, conv, maxpool, relu, dropout, flatten, softmax,
reshape. A classifier spec ends in softmax; an autoencoder spec maps its
input shape back onto itself and its reconstructions are clamped to the
[0, 1] data domain.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import (
    CompositionError,
    ConfigError,
    ContractError,
    DimensionError,
    MagicError,
    MismatchError,
    SpecError,
    TruncationError,
)

CHECKPOINT_MAGIC = b"PMDEF001"
DATA_DOMAIN = (0.0, 1.0)


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Dense:
    units: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "valid"
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int
    kind: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class Relu:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind: str = field(default="dropout", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class Softmax:
    kind: str = field(default="softmax", init=False)


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]
    kind: str = field(default="reshape", init=False)


Layer = Dense | Conv | MaxPool | Relu | Dropout | Flatten | Softmax | Reshape

_LAYER_TYPES = {
    "dense": Dense,
    "conv": Conv,
    "maxpool": MaxPool,
    "relu": Relu,
    "dropout": Dropout,
    "flatten": Flatten,
    "softmax": Softmax,
    "reshape": Reshape,
}


def layer_to_dict(layer: Layer) -> dict:
    d = {"type": layer.kind}
    for name in layer.__dataclass_fields__:
        if name == "kind":
            continue
        value = getattr(layer, name)
        d[name] = list(value) if isinstance(value, tuple) else value
    return d


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type", None)
    cls = _LAYER_TYPES.get(kind)
    if cls is None:
        raise ConfigError(f"unknown layer type {kind!r}")
    if kind == "reshape":
        d["shape"] = tuple(int(v) for v in d["shape"])
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad fields for layer {kind!r}: {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer descriptors plus the input shape they chain from."""

    name: str
    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    standardize: bool = False  # per-image standardization at the model boundary

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "standardize": self.standardize,
            "layers": [layer_to_dict(l) for l in self.layers],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            name=d["name"],
            input_shape=tuple(int(v) for v in d["input_shape"]),
            layers=tuple(layer_from_dict(l) for l in d["layers"]),
            standardize=bool(d.get("standardize", False)),
        )


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis excluded); raises SpecError on a chain break."""
    shape = tuple(int(s) for s in spec.input_shape)
    if any(s <= 0 for s in shape):
        raise SpecError(f"input shape must be positive, got {shape}")
    out = []
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.kind})"
        if isinstance(layer, Dense):
            if len(shape) != 1:
                raise SpecError(f"{where}: expects a flat input, got {shape}; insert flatten")
            if layer.units < 1:
                raise SpecError(f"{where}: units must be positive")
            shape = (layer.units,)
        elif isinstance(layer, Conv):
            if len(shape) != 3:
                raise SpecError(f"{where}: expects an HWC input, got {shape}")
            try:
                oh, ow, *_ = ad._conv_geometry(shape[0], shape[1], layer.kernel, layer.kernel, layer.stride, layer.padding)
            except (DimensionError, Exception) as exc:
                raise SpecError(f"{where}: {exc}") from None
            shape = (oh, ow, layer.filters)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise SpecError(f"{where}: expects an HWC input, got {shape}")
            if layer.window > shape[0] or layer.window > shape[1]:
                raise SpecError(f"{where}: window {layer.window} exceeds input {shape[:2]}")
            shape = ((shape[0] - layer.window) // layer.stride + 1, (shape[1] - layer.window) // layer.stride + 1, shape[2])
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Reshape):
            if int(np.prod(layer.shape)) != int(np.prod(shape)):
                raise SpecError(f"{where}: cannot reshape {shape} to {layer.shape}")
            shape = tuple(layer.shape)
        elif isinstance(layer, Softmax):
            if len(shape) != 1:
                raise SpecError(f"{where}: softmax expects a flat class vector, got {shape}")
        elif isinstance(layer, (Relu, Dropout)):
            pass
        else:  # pragma: no cover
            raise SpecError(f"{where}: unhandled layer")
        out.append(shape)
    return out


def _next_activation(layers: tuple[Layer, ...], i: int) -> str:
    """The activation the i-th parametric layer feeds into: 'relu' or 'other'."""
    for layer in layers[i + 1 :]:
        if isinstance(layer, Relu):
            return "relu"
        if isinstance(layer, (Dense, Conv, Softmax)):
            return "other"
    return "other"


class ParameterStore:
    """Weights per layer index, with freezing.

    Frozen layers keep requires_grad off and are byte-identical across any
    training run that declares them frozen.
    """

    def __init__(self):
        self.params: dict[int, dict[str, Tensor]] = {}
        self.frozen: set[int] = set()

    def add(self, layer_index: int, **tensors: Tensor) -> None:
        self.params[layer_index] = tensors

    def get(self, layer_index: int) -> dict[str, Tensor]:
        return self.params[layer_index]

    def freeze_all(self) -> None:
        self.frozen = set(self.params)
        for group in self.params.values():
            for t in group.values():
                t.requires_grad = False

    def unfreeze_all(self) -> None:
        self.frozen = set()
        for group in self.params.values():
            for t in group.values():
                t.requires_grad = True

    def is_fully_frozen(self) -> bool:
        return set(self.params) == self.frozen

    def trainable(self) -> list[Tensor]:
        out = []
        for idx in sorted(self.params):
            if idx in self.frozen:
                continue
            for name in sorted(self.params[idx]):
                out.append(self.params[idx][name])
        return out

    def named_tensors(self) -> list[tuple[int, str, Tensor]]:
        out = []
        for idx in sorted(self.params):
            for name in sorted(self.params[idx]):
                out.append((idx, name, self.params[idx][name]))
        return out

    def byte_digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for idx, name, t in self.named_tensors():
            h.update(f"{idx}:{name}:{t.shape}".encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.digest()


class Model:
    """A spec bound to its parameters; executable with or without a tape."""

    def __init__(self, spec: ModelSpec, store: ParameterStore, seed: int | None = None):
        self.spec = spec
        self.store = store
        self.seed = seed
        self.layer_shapes = infer_shapes(spec)

    # -- structure -----------------------------------------------------------

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.spec.input_shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layer_shapes[-1] if self.spec.layers else self.spec.input_shape

    @property
    def is_classifier(self) -> bool:
        return bool(self.spec.layers) and isinstance(self.spec.layers[-1], Softmax)

    @property
    def num_classes(self) -> int:
        if not self.is_classifier:
            raise ContractError(f"model {self.spec.name!r} does not end in softmax")
        return self.output_shape[0]

    def param_count(self) -> int:
        return sum(t.size for _, _, t in self.store.named_tensors())

    # -- execution -----------------------------------------------------------

    def _check_batch(self, x_shape: tuple[int, ...]) -> None:
        if tuple(x_shape[1:]) != self.input_shape:
            raise DimensionError(
                f"model {self.spec.name!r} expects input {self.input_shape}, got batch of {tuple(x_shape[1:])}"
            )

    def forward_t(
        self,
        x: Tensor,
        train: bool = False,
        rng: np.random.Generator | None = None,
        capture: int | None = None,
        stop_before: int | None = None,
    ) -> Tensor | tuple[Tensor, Tensor]:
        """Run the layer stack on a batch tensor.

        ``capture`` also returns the activation after that layer index;
        ``stop_before`` halts the stack early (used to strip a final softmax).
        """
        self._check_batch(x.shape)
        if capture is not None and not (0 <= capture < len(self.spec.layers)):
            raise ConfigError(f"capture index {capture} outside layers [0, {len(self.spec.layers)})")
        h = x
        if self.spec.standardize:
            h = ad.standardize_per_image(h)
        captured = None
        end = len(self.spec.layers) if stop_before is None else stop_before
        for i, layer in enumerate(self.spec.layers[:end]):
            if isinstance(layer, Dense):
                p = self.store.get(i)
                h = ad.add(ad.matmul(h, p["w"]), p["b"])
            elif isinstance(layer, Conv):
                p = self.store.get(i)
                h = ad.add(ad.conv2d(h, p["w"], layer.stride, layer.padding), p["b"])
            elif isinstance(layer, MaxPool):
                h = ad.maxpool2d(h, layer.window, layer.stride)
            elif isinstance(layer, Relu):
                h = ad.relu(h)
            elif isinstance(layer, Dropout):
                if train and layer.rate > 0.0:
                    if rng is None:
                        raise ContractError("dropout in training mode needs an rng")
                    h = ad.dropout(h, layer.rate, rng)
            elif isinstance(layer, Flatten):
                h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            elif isinstance(layer, Reshape):
                h = ad.reshape(h, (h.shape[0], *layer.shape))
            elif isinstance(layer, Softmax):
                h = ad.softmax(h, axis=-1)
            if capture == i:
                captured = h
        if capture is not None:
            return h, captured
        return h

    def logits_t(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None, capture: int | None = None):
        """Pre-softmax outputs; the spec must end in softmax."""
        if not self.is_classifier:
            raise ContractError(f"model {self.spec.name!r} has no softmax head; no logits to expose")
        return self.forward_t(x, train=train, rng=rng, capture=capture, stop_before=len(self.spec.layers) - 1)

    def proba_t(self, x: Tensor) -> Tensor:
        if not self.is_classifier:
            raise ContractError(f"model {self.spec.name!r} has no softmax head")
        return self.forward_t(x)

    def proba_t_with_capture(self, x: Tensor, layer_index: int) -> tuple[Tensor, Tensor]:
        """Class distribution plus the activation after ``layer_index``."""
        if not self.is_classifier:
            raise ContractError(f"model {self.spec.name!r} has no softmax head")
        return self.forward_t(x, capture=layer_index)

    def features(self, x: np.ndarray, layer_index: int) -> np.ndarray:
        """Feature map after ``layer_index`` for a raw input batch."""
        _, captured = self.forward_t(Tensor(x), capture=layer_index)
        return captured.data

    def reconstruct_t(self, x: Tensor) -> Tensor:
        if self.output_shape != self.input_shape:
            raise DimensionError(
                f"model {self.spec.name!r} maps {self.input_shape} to {self.output_shape}; not an autoencoder"
            )
        return ad.clip(self.forward_t(x), *DATA_DOMAIN)

    # -- numpy conveniences ----------------------------------------------------

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.proba_t(Tensor(x)).data

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self.logits_t(Tensor(x)).data

    def predict_class(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.reconstruct_t(Tensor(x)).data


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministically initialize a model from (spec, seed).

    He-uniform for weights feeding a ReLU, Glorot-uniform otherwise, zero
    biases. The weight layout and draw order are fixed by the spec, so equal
    seeds give byte-identical parameters.
    """
    shapes = infer_shapes(spec)  # raises SpecError on a chain break
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    in_shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            fan_in, fan_out = in_shape[0], layer.units
            limit = np.sqrt(6.0 / fan_in) if _next_activation(spec.layers, i) == "relu" else np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            store.add(i, w=Tensor(w, requires_grad=True), b=Tensor(np.zeros(fan_out), requires_grad=True))
        elif isinstance(layer, Conv):
            k, cin, cout = layer.kernel, in_shape[2], layer.filters
            fan_in = k * k * cin
            fan_out = k * k * cout
            limit = np.sqrt(6.0 / fan_in) if _next_activation(spec.layers, i) == "relu" else np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(k, k, cin, cout))
            store.add(i, w=Tensor(w, requires_grad=True), b=Tensor(np.zeros(cout), requires_grad=True))
        in_shape = shapes[i]
    return Model(spec, store, seed=seed)


# ---------------------------------------------------------------------------
# hidden-layer probe


@dataclass
class HiddenProbe:
    """Softmax projection of an intermediate feature map onto a small simplex."""

    source_layer: int
    w: Tensor
    b: Tensor

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    def trainable(self) -> list[Tensor]:
        return [self.b, self.w]


def build_probe(model: Model, source_layer: int, dim: int, seed: int) -> HiddenProbe:
    if not (0 <= source_layer < len(model.spec.layers)):
        raise ConfigError(f"probe source layer {source_layer} outside [0, {len(model.spec.layers)})")
    if dim < 1:
        raise ConfigError(f"probe dimension must be positive, got {dim}")
    feat = int(np.prod(model.layer_shapes[source_layer]))
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (feat + dim))
    w = Tensor(rng.uniform(-limit, limit, size=(feat, dim)), requires_grad=True)
    b = Tensor(np.zeros(dim), requires_grad=True)
    return HiddenProbe(source_layer=source_layer, w=w, b=b)


def probe_dist_t(probe: HiddenProbe, features: Tensor) -> Tensor:
    """softmax(W . flatten(F) + b) over a batch of feature maps."""
    flat = ad.reshape(features, (features.shape[0], int(np.prod(features.shape[1:]))))
    if flat.shape[1] != probe.w.shape[0]:
        raise ConfigError(f"probe expects features of length {probe.w.shape[0]}, got {flat.shape[1]}")
    return ad.softmax(ad.add(ad.matmul(flat, probe.w), probe.b), axis=-1)


def hidden_probe_forward(model: Model, probe: HiddenProbe, x: np.ndarray) -> np.ndarray:
    """Probe distribution y(x) for a raw input batch."""
    _, feats = model.forward_t(Tensor(x), capture=probe.source_layer)
    return probe_dist_t(probe, feats).data


# ---------------------------------------------------------------------------
# defended composition


class DefendedModel:
    """The composition classifier(AE(x)); differentiable end to end."""

    def __init__(self, classifier: Model, ae: Model):
        if ae.output_shape != classifier.input_shape or ae.input_shape != classifier.input_shape:
            raise CompositionError(
                f"autoencoder maps {ae.input_shape} to {ae.output_shape}, classifier expects {classifier.input_shape}"
            )
        self.classifier = classifier
        self.ae = ae
        self.spec = classifier.spec

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.ae.input_shape

    @property
    def is_classifier(self) -> bool:
        return True

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def logits_t(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        return self.classifier.logits_t(self.ae.reconstruct_t(x))

    def proba_t(self, x: Tensor) -> Tensor:
        return self.classifier.proba_t(self.ae.reconstruct_t(x))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.proba_t(Tensor(x)).data

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self.logits_t(Tensor(x)).data

    def predict_class(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)


def compose_defended(classifier: Model, ae: Model) -> DefendedModel:
    return DefendedModel(classifier, ae)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> None:
    """Write magic, a length-prefixed JSON header, then raw little-endian
    float64 weight blocks in header order."""
    tensors = model.store.named_tensors()
    entries = []
    offset = 0
    blocks = []
    for idx, name, t in tensors:
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"layer": idx, "name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "init": "he_glorot_uniform",
        "tensors": entries,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for raw in blocks:
            fh.write(raw)


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise MagicError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 4:
        raise TruncationError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    if len(blob) < pos + hlen:
        raise TruncationError(f"{path}: truncated header (need {hlen} bytes)")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MismatchError(f"{path}: unreadable header: {exc}") from None
    pos += hlen
    spec = ModelSpec.from_dict(header["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise MismatchError(f"{path}: checkpoint spec {spec.name!r} does not match the expected spec {expected_spec.name!r}")
    store = ParameterStore()
    groups: dict[int, dict[str, Tensor]] = {}
    total = sum(e["nbytes"] for e in header["tensors"])
    if len(blob) - pos != total:
        raise MismatchError(f"{path}: weight payload is {len(blob) - pos} bytes, header declares {total}")
    for e in header["tensors"]:
        start = pos + e["offset"]
        end = start + e["nbytes"]
        if end > len(blob):
            raise TruncationError(f"{path}: truncated weight block {e['layer']}:{e['name']}")
        arr = np.frombuffer(blob[start:end], dtype="<f8").reshape([int(s) for s in e["shape"]])
        if arr.size * 8 != e["nbytes"]:
            raise MismatchError(f"{path}: block {e['layer']}:{e['name']} size disagrees with its shape")
        groups.setdefault(int(e["layer"]), {})[e["name"]] = Tensor(arr.copy(), requires_grad=True)
    for idx, tensors in groups.items():
        store.add(idx, **tensors)
    model = Model(spec, store, seed=header.get("seed"))
    # sanity: parameter shapes must match what the spec would allocate
    probe = build_model(spec, seed=0)
    want = {(i, n): t.shape for i, n, t in probe.store.named_tensors()}
    got = {(i, n): t.shape for i, n, t in store.named_tensors()}
    if want != got:
        raise MismatchError(f"{path}: weight shapes disagree with the spec")
    return model
