"""Layer-by-layer network descriptions, shape inference and weight counting."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

KINDS = (
    "conv",
    "max-pool",
    "avg-pool",
    "fully-connected",
    "relu",
    "dropout",
    "batch-norm",
    "softmax",
)
WEIGHTED = ("conv", "fully-connected")


class SpecError(ValueError):
    """Raised for an inconsistent network description.

    ``layer`` holds the name of the offending layer when one can be blamed.
    """

    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(f"layer {layer!r}: {message}" if layer else message)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    group: str | None = None
    channels: int | None = None  # conv output channels
    kernel: int | None = None  # conv kernel extent (square, odd)
    window: int | None = None  # pooling window == stride
    units: int | None = None  # fully-connected outputs
    p: float | None = None  # dropout probability
    bias: bool = True

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if d.get("bias", True):
            d.pop("bias")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)
    title: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    # ------------------------------------------------------------ structure

    def validate(self):
        names = set()
        for layer in self.layers:
            if layer.kind not in KINDS:
                raise SpecError(f"unknown kind {layer.kind!r}", layer.name)
            if layer.name in names:
                raise SpecError("duplicate layer name", layer.name)
            names.add(layer.name)
            if layer.kind == "dropout" and not (layer.p is not None and 0.0 <= layer.p < 1.0):
                raise SpecError("dropout probability must lie in [0, 1)", layer.name)
        if not any(l.kind in WEIGHTED for l in self.layers):
            raise SpecError("network has no trainable layer")
        for i, layer in enumerate(self.layers):
            if layer.kind == "softmax" and i != len(self.layers) - 1:
                raise SpecError("softmax must be the final layer", layer.name)
        self.shapes()

    def shapes(self):
        """Output shape of every layer (batch extent excluded)."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            shape = _output_shape(layer, shape)
            out.append(shape)
        return out

    @property
    def n_outputs(self):
        shape = self.shapes()[-1]
        if len(shape) != 1:
            raise SpecError(f"network output is not a vector: {shape}")
        return shape[0]

    @property
    def last_weighted(self):
        return max(i for i, l in enumerate(self.layers) if l.kind in WEIGHTED)

    def _last_is_fc(self):
        return self.layers[self.last_weighted].kind == "fully-connected"

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def groups(self):
        seen = []
        for l in self.layers:
            if l.group and l.group not in seen:
                seen.append(l.group)
        return seen

    def with_outputs(self, n):
        """Same network with the final fully-connected layer resized to ``n``."""
        idx = self.last_weighted
        if not self._last_is_fc():
            raise SpecError("final trainable layer is not fully-connected", self.layers[idx].name)
        layers = list(self.layers)
        layers[idx] = replace(layers[idx], units=int(n))
        return replace(self, layers=tuple(layers))

    # -------------------------------------------------------- serialisation

    def to_dict(self):
        return {
            "title": self.title,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            title=d.get("title", ""),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def digest(self):
        """SHA-256 of the canonical (sorted, compact) JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()


def _output_shape(layer, shape):
    kind = layer.kind
    if kind == "conv":
        if len(shape) != 3:
            raise SpecError(f"conv expects a (C, H, W) input, got {shape}", layer.name)
        if not layer.channels or not layer.kernel or layer.kernel % 2 == 0:
            raise SpecError("conv needs channels and an odd kernel", layer.name)
        return (layer.channels, shape[1], shape[2])
    if kind in ("max-pool", "avg-pool"):
        if len(shape) != 3:
            raise SpecError(f"pooling expects a (C, H, W) input, got {shape}", layer.name)
        w = layer.window or 0
        if w < 1 or shape[1] < w or shape[2] < w:
            raise SpecError(f"pool window {w} does not fit {shape}", layer.name)
        return (shape[0], shape[1] // w, shape[2] // w)
    if kind == "fully-connected":
        if not layer.units:
            raise SpecError("fully-connected needs units", layer.name)
        return (layer.units,)
    return shape


def layer_weight_count(spec, index):
    """Multiplicative weights of one layer; biases and batch-norm excluded."""
    layer = spec.layers[index]
    in_shape = spec.input_shape if index == 0 else spec.shapes()[index - 1]
    if layer.kind == "conv":
        return in_shape[0] * layer.channels * layer.kernel * layer.kernel
    if layer.kind == "fully-connected":
        fan_in = 1
        for s in in_shape:
            fan_in *= s
        return fan_in * layer.units
    return 0


def resolve_subset(spec, subset):
    """Layer indices selected by a mix of layer names and group names."""
    if subset is None:
        return list(range(len(spec.layers)))
    names = {l.name for l in spec.layers}
    groups = set(spec.groups())
    chosen = set()
    for key in subset:
        if key in names:
            chosen.update(i for i, l in enumerate(spec.layers) if l.name == key)
        elif key in groups:
            chosen.update(i for i, l in enumerate(spec.layers) if l.group == key)
        else:
            raise SpecError(f"unknown layer or group {key!r} in subset")
    return sorted(chosen)


def count_weights(spec, layer_subset=None):
    """Number of conv-kernel and fully-connected weights.

    ``layer_subset`` may name layers or groups (``"FC"``, ``"CONV-4"``);
    ``None`` counts the whole network.
    """
    return sum(layer_weight_count(spec, i) for i in resolve_subset(spec, layer_subset))
