"""Model architectures, prediction, and a portable binary checkpoint format.

A ModelSpec is a validated chain of layer descriptors; building it yields a
Model whose parameters live in named autodiff tensors. Victim and surrogate
experiments deliberately use distinct families (a small CNN vs a wide MLP) so
the attacker never shares the target's architecture.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, InvalidSpecError, ShapeError

CHECKPOINT_MAGIC = b"XLAB"
CHECKPOINT_VERSION = 1

_LAYER_KINDS = ("dense", "conv", "relu", "maxpool", "dropout", "flatten")


@dataclass(frozen=True)
class Layer:
    """One layer descriptor; only the fields its kind uses are meaningful."""

    kind: str
    units: int = 0        # dense
    filters: int = 0      # conv
    kernel: int = 0       # conv
    stride: int = 1       # conv
    pad: int = 0          # conv
    size: int = 0         # maxpool
    rate: float = 0.0     # dropout

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for name in ("units", "filters", "kernel", "stride", "pad", "size", "rate"):
            value = getattr(self, name)
            if value:
                d[name] = value
        if self.kind == "conv":
            d["stride"] = self.stride
            d["pad"] = self.pad
        return d

    @staticmethod
    def from_dict(d: dict) -> "Layer":
        kind = d.get("kind")
        if kind not in _LAYER_KINDS:
            raise CheckpointError(f"unknown layer kind {kind!r}")
        fields = ("units", "filters", "kernel", "stride", "pad", "size", "rate")
        known = {k: v for k, v in d.items() if k in fields}
        return Layer(kind=kind, **known)


def dense(units: int) -> Layer:
    return Layer("dense", units=units)


def conv(filters: int, kernel: int, stride: int = 1, pad: int = 0) -> Layer:
    return Layer("conv", filters=filters, kernel=kernel, stride=stride, pad=pad)


def relu() -> Layer:
    return Layer("relu")


def maxpool(size: int) -> Layer:
    return Layer("maxpool", size=size)


def dropout(rate: float = 0.25) -> Layer:
    return Layer("dropout", rate=rate)


def flatten() -> Layer:
    return Layer("flatten")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: input shape, layer chain, class count."""

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def validate(self) -> list[tuple[int, ...]]:
        """Walk the shape chain; returns the per-layer output shapes.

        Raises InvalidSpecError naming the first failing layer.
        """
        if self.num_classes < 2:
            raise InvalidSpecError(f"num_classes must be >= 2, got {self.num_classes}")
        shape: tuple[int, ...] = tuple(self.input_shape)
        if len(shape) != 3 or any(n < 1 for n in shape):
            raise InvalidSpecError(f"input_shape must be three positive extents, got {shape}")
        shapes = []
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.kind})"
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise InvalidSpecError(f"{where}: needs CxHxW input, have {shape}")
                c, h, w = shape
                if layer.kernel > h + 2 * layer.pad or layer.kernel > w + 2 * layer.pad:
                    raise InvalidSpecError(
                        f"{where}: kernel {layer.kernel} larger than padded input {h}x{w}"
                    )
                ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1 or layer.filters < 1 or layer.stride < 1:
                    raise InvalidSpecError(f"{where}: produces empty output")
                shape = (layer.filters, ho, wo)
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise InvalidSpecError(f"{where}: needs CxHxW input, have {shape}")
                c, h, w = shape
                if layer.size < 1 or h // layer.size < 1 or w // layer.size < 1:
                    raise InvalidSpecError(f"{where}: window {layer.size} larger than input {h}x{w}")
                shape = (c, h // layer.size, w // layer.size)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise InvalidSpecError(f"{where}: needs flat input, have {shape}; add flatten")
                if layer.units < 1:
                    raise InvalidSpecError(f"{where}: units must be >= 1")
                shape = (layer.units,)
            elif layer.kind == "dropout":
                if not 0.0 <= layer.rate < 1.0:
                    raise InvalidSpecError(f"{where}: rate must be in [0, 1)")
            elif layer.kind == "relu":
                pass
            else:
                raise InvalidSpecError(f"{where}: unknown kind")
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise InvalidSpecError(
                f"final layer produces shape {shape}, expected ({self.num_classes},) logits"
            )
        return shapes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            layers=tuple(Layer.from_dict(ld) for ld in d["layers"]),
            num_classes=d["num_classes"],
        )


def model_family(family: str, input_shape: tuple[int, int, int], num_classes: int) -> ModelSpec:
    """Shipped architectures. Victim and surrogate configs keep these distinct."""
    if family == "cnn-small":
        layers = (
            conv(8, 3, stride=1, pad=1), relu(), maxpool(2),
            conv(16, 3, stride=1, pad=1), relu(), maxpool(2),
            flatten(), dense(64), dropout(0.25), dense(num_classes),
        )
    elif family == "cnn-thin":
        # single wider-kernel conv block, no dropout: a deliberately different
        # (and smaller) convolutional family for the attacker's side
        layers = (
            conv(6, 5, stride=1, pad=2), relu(), maxpool(2),
            conv(12, 3, stride=1, pad=1), relu(), maxpool(2),
            flatten(), dense(32), relu(), dense(num_classes),
        )
    elif family == "mlp-wide":
        layers = (flatten(), dense(256), relu(), dense(128), relu(), dense(num_classes))
    else:
        raise InvalidSpecError(f"unknown model family {family!r}")
    spec = ModelSpec(name=family, input_shape=input_shape, layers=layers, num_classes=num_classes)
    spec.validate()
    return spec


@dataclass
class Model:
    """A realized parameter set for a spec, plus free-form metadata."""

    spec: ModelSpec
    params: dict[str, T.Tensor]
    rng_seed: int
    metadata: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: T.Tensor, training: bool = False, dropout_seed: int = 0) -> T.Tensor:
        """Logits for a batch tensor of shape BxCxHxW."""
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {x.shape} does not match model input {self.spec.input_shape}"
            )
        out = x
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                out = T.conv2d(out, self.params[f"layers.{i}.weight"],
                               stride=layer.stride, padding=layer.pad)
                out = T.add(out, _conv_bias_view(self.params[f"layers.{i}.bias"]))
            elif layer.kind == "dense":
                out = T.add(T.matmul(out, self.params[f"layers.{i}.weight"]),
                            self.params[f"layers.{i}.bias"])
            elif layer.kind == "relu":
                out = T.relu(out)
            elif layer.kind == "maxpool":
                out = T.maxpool2d(out, layer.size)
            elif layer.kind == "flatten":
                out = T.flatten(out)
            elif layer.kind == "dropout":
                out = T.dropout(out, layer.rate, seed=_mix_seed(dropout_seed, i), training=training)
        return out


def _conv_bias_view(bias: T.Tensor) -> T.Tensor:
    """Reshape a (K,) bias to broadcast over (B,K,H,W), keeping gradients."""
    k = bias.shape[0]
    shaped = bias.data.reshape(k, 1, 1)
    out = T.Tensor.__new__(T.Tensor)
    out.data = shaped
    out.requires_grad = bias.requires_grad
    out.grad = None
    out.name = None
    out._op = "reshape"

    def backward_fn(g):
        bias._accumulate(g.reshape(k))

    if bias.requires_grad:
        out._parents = (bias,)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _mix_seed(base: int, salt: int) -> int:
    return (int(base) * 1_000_003 + salt * 7919 + 0x9E3779B9) % (2**63)


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Initialize parameters: Kaiming-uniform fan-in weights, zero biases.

    Deterministic given the seed; the same seed always yields bitwise
    identical parameters.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}
    shape: tuple[int, ...] = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            c = shape[0]
            fan_in = c * layer.kernel * layer.kernel
            bound = float(np.sqrt(6.0 / fan_in))
            w = rng.uniform(-bound, bound, size=(layer.filters, c, layer.kernel, layer.kernel))
            params[f"layers.{i}.weight"] = T.Tensor(w.astype(np.float32), requires_grad=True,
                                                    name=f"layers.{i}.weight")
            params[f"layers.{i}.bias"] = T.Tensor(np.zeros(layer.filters, dtype=np.float32),
                                                  requires_grad=True, name=f"layers.{i}.bias")
            h = (shape[1] + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w_ = (shape[2] + 2 * layer.pad - layer.kernel) // layer.stride + 1
            shape = (layer.filters, h, w_)
        elif layer.kind == "dense":
            fan_in = shape[0]
            bound = float(np.sqrt(6.0 / fan_in))
            w = rng.uniform(-bound, bound, size=(fan_in, layer.units))
            params[f"layers.{i}.weight"] = T.Tensor(w.astype(np.float32), requires_grad=True,
                                                    name=f"layers.{i}.weight")
            params[f"layers.{i}.bias"] = T.Tensor(np.zeros(layer.units, dtype=np.float32),
                                                  requires_grad=True, name=f"layers.{i}.bias")
            shape = (layer.units,)
        elif layer.kind == "maxpool":
            shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
    return Model(spec=spec, params=params, rng_seed=seed)


def predict_proba(model: Model, batch: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for a BxCxHxW batch; rows sum to 1 within 1e-6.

    Evaluation mode: dropout is the identity. Pure function of (model, batch).
    """
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim != 4 or x.shape[1:] != model.spec.input_shape:
        raise ShapeError(
            f"batch shape {x.shape} does not match model input {model.spec.input_shape}"
        )
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        logits = model.forward(T.Tensor(x[start:start + batch_size]), training=False)
        chunks.append(np.exp(T.log_softmax(logits).data))
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.spec.num_classes), np.float32)


def predict_label(model: Model, batch: np.ndarray, batch_size: int = 64) -> list[int]:
    """Argmax class per row; ties resolve to the lowest class index."""
    probs = predict_proba(model, batch, batch_size=batch_size)
    return [int(i) for i in probs.argmax(axis=1)]


def _write_array(f, name: str, arr: np.ndarray) -> None:
    name_bytes = name.encode("utf-8")
    f.write(struct.pack("<I", len(name_bytes)))
    f.write(name_bytes)
    f.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        f.write(struct.pack("<I", extent))
    f.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated file")
    return data


def _read_array(f) -> tuple[str, np.ndarray] | None:
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointError("truncated file")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(f, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(f, 4 * count)
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return name, arr


def _write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name, arr in arrays.items():
            _write_array(f, name, arr)


def _read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version > CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt header: {e}") from None
        arrays: dict[str, np.ndarray] = {}
        while True:
            item = _read_array(f)
            if item is None:
                break
            arrays[item[0]] = item[1]
    return header, arrays


def save_checkpoint(model: Model, path) -> None:
    """Write a bit-exact checkpoint: magic, version, JSON header, then
    length-prefixed little-endian float32 parameter records."""
    header = {
        "kind": "model",
        "spec": model.spec.to_dict(),
        "rng_seed": model.rng_seed,
        "metadata": model.metadata,
    }
    _write_container(path, header, {k: v.data for k, v in model.params.items()})


def load_checkpoint(path) -> Model:
    header, arrays = _read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"expected a model checkpoint, found kind={header.get('kind')!r}")
    spec = ModelSpec.from_dict(header["spec"])
    spec.validate()
    model = build_model(spec, seed=int(header.get("rng_seed", 0)))
    expected = set(model.params)
    if set(arrays) != expected:
        raise CheckpointError(
            f"parameter names do not match spec: missing {sorted(expected - set(arrays))}, "
            f"unexpected {sorted(set(arrays) - expected)}"
        )
    for name, arr in arrays.items():
        if arr.shape != model.params[name].shape:
            raise CheckpointError(
                f"parameter {name}: shape {arr.shape} does not match spec-implied "
                f"{model.params[name].shape}"
            )
        model.params[name] = T.Tensor(arr, requires_grad=True, name=name)
    model.metadata = dict(header.get("metadata", {}))
    return model
