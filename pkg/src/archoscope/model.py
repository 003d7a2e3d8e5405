"""Architecture description, shape propagation and MAC bookkeeping.

Only square tensors are modelled. Layers are immutable dataclasses and an
:class:`Architecture` is an input shape plus an ordered tuple of layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Union


class ShapeError(ValueError):
    """Base class for shape propagation failures."""


class NonIntegralShape(ShapeError):
    pass


class DivisibilityError(ShapeError):
    pass


class SchemaError(ValueError):
    """Architecture JSON does not follow the schema."""


class ConvVariant(str, Enum):
    AUTO = "auto"
    BASIC = "basic"
    FAST = "fast"
    RGB = "rgb"


class ActivationKind(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class TensorShape:
    h: int
    c: int

    def __post_init__(self):
        if self.h < 1 or self.c < 1:
            raise ShapeError(f"invalid tensor shape {self.h}x{self.h}x{self.c}")

    @property
    def size(self) -> int:
        return self.h * self.h * self.c


@dataclass(frozen=True)
class ConvSpec:
    k: int
    z: int
    s: int = 1
    p: int = 0
    variant: ConvVariant = ConvVariant.AUTO

    type_name = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "variant", ConvVariant(self.variant))
        if self.k < 1 or self.z < 1 or self.s < 1:
            raise ShapeError(f"invalid conv spec {self}")
        if not 0 <= self.p < self.z:
            raise ShapeError(f"padding must satisfy 0 <= p < z, got p={self.p}, z={self.z}")


@dataclass(frozen=True)
class MaxPoolSpec:
    z_pool: int = 2

    type_name = "maxpool"

    def __post_init__(self):
        if self.z_pool < 2:
            raise ShapeError(f"z_pool must be >= 2, got {self.z_pool}")


@dataclass(frozen=True)
class DenseSpec:
    n_e: int

    type_name = "dense"

    def __post_init__(self):
        if self.n_e < 1:
            raise ShapeError(f"n_e must be >= 1, got {self.n_e}")


@dataclass(frozen=True)
class ActivationSpec:
    kind: ActivationKind

    type_name = "activation"

    def __post_init__(self):
        object.__setattr__(self, "kind", ActivationKind(self.kind))


LayerSpec = Union[ConvSpec, MaxPoolSpec, DenseSpec, ActivationSpec]
LAYER_TYPES = {cls.type_name: cls for cls in (ConvSpec, MaxPoolSpec, DenseSpec, ActivationSpec)}


@dataclass(frozen=True)
class Architecture:
    input_shape: TensorShape
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        propagate_shapes(self)

    def __len__(self):
        return len(self.layers)

    def shapes(self) -> list:
        return propagate_shapes(self)

    def to_dict(self) -> dict:
        return {
            "input": {"h": self.input_shape.h, "c": self.input_shape.c},
            "layers": [layer_to_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Architecture":
        return architecture_from_dict(data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "Architecture":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
        return architecture_from_dict(data)


def conv_output_side(h_in: int, z: int, p: int, s: int) -> int:
    """Output side of a square convolution, ``(h_in - z + 2p) / s + 1``.

    Raises :class:`NonIntegralShape` if the stride does not divide the span
    exactly or the result is not positive.
    """
    if s < 1 or not 0 <= p < z:
        raise ShapeError(f"invalid conv geometry z={z} s={s} p={p}")
    span = h_in - z + 2 * p
    if span < 0:
        raise NonIntegralShape(f"kernel {z} (p={p}) larger than input {h_in}")
    if span % s:
        raise NonIntegralShape(f"stride {s} does not divide {h_in} - {z} + 2*{p} = {span}")
    return span // s + 1


def _dense_input_len(shape: TensorShape) -> int:
    # flatten is implicit: any spatial shape feeds a dense layer as a vector
    return shape.size


def layer_output_shape(layer: LayerSpec, shape: TensorShape) -> TensorShape:
    if isinstance(layer, ConvSpec):
        return TensorShape(conv_output_side(shape.h, layer.z, layer.p, layer.s), layer.k)
    if isinstance(layer, MaxPoolSpec):
        if shape.h % layer.z_pool:
            raise DivisibilityError(f"side {shape.h} not divisible by z_pool={layer.z_pool}")
        return TensorShape(shape.h // layer.z_pool, shape.c)
    if isinstance(layer, DenseSpec):
        return TensorShape(1, layer.n_e)
    if isinstance(layer, ActivationSpec):
        return shape
    raise TypeError(f"unknown layer {layer!r}")


def propagate_shapes(arch: Architecture) -> list:
    """Return the output shape of every layer, or ``[input_shape]`` if empty."""
    shape = arch.input_shape
    if not arch.layers:
        return [shape]
    shapes = []
    for layer in arch.layers:
        shape = layer_output_shape(layer, shape)
        shapes.append(shape)
    return shapes


def input_shapes(arch: Architecture) -> list:
    """Input shape seen by each layer."""
    return [arch.input_shape] + propagate_shapes(arch)[:-1] if arch.layers else []


def mac_complexity(layer: LayerSpec, in_shape: TensorShape) -> int:
    """MAC count of conv and dense layers.

    Pooling and activation layers have no MACs; for them the number of output
    elements is returned as a proxy (see :func:`is_mac_layer`).
    """
    out = layer_output_shape(layer, in_shape)
    if isinstance(layer, ConvSpec):
        return (layer.z ** 2 * in_shape.c) * (out.h ** 2 * layer.k)
    if isinstance(layer, DenseSpec):
        return _dense_input_len(in_shape) * layer.n_e
    return out.size


def is_mac_layer(layer: LayerSpec) -> bool:
    return isinstance(layer, (ConvSpec, DenseSpec))


def select_conv_variant(c_in: int, c_out: int) -> ConvVariant:
    if c_in % 4 == 0 and c_out % 2 == 0:
        return ConvVariant.FAST
    if c_in == 3:
        return ConvVariant.RGB
    return ConvVariant.BASIC


def resolved_variant(layer: ConvSpec, in_shape: TensorShape) -> ConvVariant:
    if layer.variant is ConvVariant.AUTO:
        return select_conv_variant(in_shape.c, layer.k)
    return layer.variant


# -- JSON ---------------------------------------------------------------------

_FIELDS = {
    "conv2d": {"k", "z", "s", "p", "variant"},
    "maxpool": {"z_pool"},
    "dense": {"n_e"},
    "activation": {"kind"},
}
_REQUIRED = {"conv2d": {"k", "z"}, "maxpool": set(), "dense": {"n_e"}, "activation": {"kind"}}


def layer_to_dict(layer: LayerSpec) -> dict:
    out = {"type": layer.type_name}
    if isinstance(layer, ConvSpec):
        out.update(k=layer.k, z=layer.z, s=layer.s, p=layer.p, variant=layer.variant.value)
    elif isinstance(layer, MaxPoolSpec):
        out.update(z_pool=layer.z_pool)
    elif isinstance(layer, DenseSpec):
        out.update(n_e=layer.n_e)
    else:
        out.update(kind=layer.kind.value)
    return out


def _check_int(name, value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where}: field {name!r} must be an integer, got {value!r}")
    return value


def layer_from_dict(data: dict, index: int = 0) -> LayerSpec:
    where = f"layers[{index}]"
    if not isinstance(data, dict):
        raise SchemaError(f"{where}: expected an object")
    kind = data.get("type")
    if kind not in _FIELDS:
        raise SchemaError(f"{where}: unknown layer type {kind!r}")
    fields = set(data) - {"type"}
    unknown = fields - _FIELDS[kind]
    if unknown:
        raise SchemaError(f"{where}: unknown fields {sorted(unknown)}")
    missing = _REQUIRED[kind] - fields
    if missing:
        raise SchemaError(f"{where}: missing fields {sorted(missing)}")
    try:
        if kind == "conv2d":
            kwargs = {n: _check_int(n, data[n], where) for n in ("k", "z", "s", "p") if n in data}
            return ConvSpec(variant=ConvVariant(data.get("variant", "auto")), **kwargs)
        if kind == "maxpool":
            return MaxPoolSpec(_check_int("z_pool", data.get("z_pool", 2), where))
        if kind == "dense":
            return DenseSpec(_check_int("n_e", data["n_e"], where))
        return ActivationSpec(ActivationKind(data["kind"]))
    except ValueError as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"{where}: {exc}") from exc


def architecture_from_dict(data: dict) -> Architecture:
    if not isinstance(data, dict):
        raise SchemaError("architecture must be a JSON object")
    unknown = set(data) - {"input", "layers"}
    if unknown:
        raise SchemaError(f"unknown top-level fields {sorted(unknown)}")
    inp = data.get("input")
    if not isinstance(inp, dict) or set(inp) != {"h", "c"}:
        raise SchemaError("'input' must be an object with exactly the fields h and c")
    layers = data.get("layers")
    if not isinstance(layers, list):
        raise SchemaError("'layers' must be a list")
    try:
        shape = TensorShape(_check_int("h", inp["h"], "input"), _check_int("c", inp["c"], "input"))
        return Architecture(shape, tuple(layer_from_dict(l, i) for i, l in enumerate(layers)))
    except ShapeError as exc:
        raise SchemaError(str(exc)) from exc


def relu_or_not(layer: ActivationSpec) -> bool:
    return layer.kind is ActivationKind.RELU


def diff_architectures(a: Architecture, b: Architecture, strict_activation: bool = False) -> list:
    """Field-level differences between two architectures.

    Activations compare as ReLU-or-not unless ``strict_activation``; conv
    variants compare after resolving ``auto``.
    """
    lines = []
    if a.input_shape != b.input_shape:
        lines.append(f"input: {a.input_shape.h}x{a.input_shape.c} != {b.input_shape.h}x{b.input_shape.c}")
    if len(a.layers) != len(b.layers):
        lines.append(f"layer count: {len(a.layers)} != {len(b.layers)}")
    in_a = input_shapes(a)
    in_b = input_shapes(b)
    for i, (la, lb) in enumerate(zip(a.layers, b.layers), start=1):
        if type(la) is not type(lb):
            lines.append(f"layer {i}: type {la.type_name} != {lb.type_name}")
            continue
        da, db = layer_to_dict(la), layer_to_dict(lb)
        if isinstance(la, ConvSpec):
            da["variant"] = resolved_variant(la, in_a[i - 1]).value
            db["variant"] = resolved_variant(lb, in_b[i - 1]).value
        if isinstance(la, ActivationSpec) and not strict_activation:
            da["kind"] = "relu" if relu_or_not(la) else "not-relu"
            db["kind"] = "relu" if relu_or_not(lb) else "not-relu"
        for name in da:
            if da[name] != db[name]:
                lines.append(f"layer {i}: {name} {da[name]} != {db[name]}")
    return lines
