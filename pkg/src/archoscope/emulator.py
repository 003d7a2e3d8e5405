"""Symbolic walk of the CMSIS-NN loop nests.

Each layer becomes a tree of timed events. Leaves carry one
:class:`EventClass`; composites may declare an ``overhead`` span at their
start (loop-iteration setup such as ``init_sum``/``apply_mac``), which the
renderer draws with the composite's own class signature.
"""

from __future__ import annotations

import gc
import json
from dataclasses import dataclass, field
from enum import Enum

from .model import (
    ActivationKind,
    ActivationSpec,
    Architecture,
    ConvSpec,
    DenseSpec,
    MaxPoolSpec,
    TensorShape,
    input_shapes,
    layer_output_shape,
    resolved_variant,
)


class EventClass(str, Enum):
    IM2COL_COLUMN = "Im2colColumn"
    GEMM_CALL = "GemmCall"
    GEMM_KERNEL_PAIR = "GemmKernelPair"
    SIMD_MAC_GROUP = "SimdMacGroup"
    GEMM_REMAINDER = "GemmRemainder"
    POOL_X_STEP = "PoolXStep"
    POOL_Y_STEP = "PoolYStep"
    DENSE_NEURON_GROUP = "DenseNeuronGroup"
    DENSE_MAC_GROUP = "DenseMacGroup"
    DENSE_REMAINDER_NEURON = "DenseRemainderNeuron"
    ACT_RELU_ELEM = "ActReluElem"
    ACT_SIGMOID_ELEM = "ActSigmoidElem"
    ACT_TANH_ELEM = "ActTanhElem"
    LAYER_GAP = "LayerGap"
    COMPOSITE = "Composite"


# stable integer codes used by the render kernels
CLASS_CODES = {cls: i for i, cls in enumerate(EventClass)}
SIGNAL_CLASSES = [c for c in EventClass if c not in (EventClass.LAYER_GAP, EventClass.COMPOSITE)]

ACTIVATION_CLASS = {
    ActivationKind.RELU: EventClass.ACT_RELU_ELEM,
    ActivationKind.TANH: EventClass.ACT_TANH_ELEM,
    ActivationKind.SIGMOID: EventClass.ACT_SIGMOID_ELEM,
    # softmax shares the sigmoid cost class
    ActivationKind.SOFTMAX: EventClass.ACT_SIGMOID_ELEM,
}

DEFAULT_DURATIONS_US = {
    EventClass.SIMD_MAC_GROUP: 0.25,
    EventClass.DENSE_MAC_GROUP: 0.25,
    EventClass.IM2COL_COLUMN: 0.5,
    EventClass.POOL_X_STEP: 0.2,
    EventClass.POOL_Y_STEP: 1.0,
    EventClass.ACT_RELU_ELEM: 0.05,
    EventClass.ACT_TANH_ELEM: 0.4,
    EventClass.ACT_SIGMOID_ELEM: 0.8,
    EventClass.LAYER_GAP: 50.0,
    # composite overheads and remainder paths
    EventClass.GEMM_CALL: 0.3,
    EventClass.GEMM_KERNEL_PAIR: 0.1,
    EventClass.GEMM_REMAINDER: 0.2,
    EventClass.DENSE_NEURON_GROUP: 0.1,
    EventClass.DENSE_REMAINDER_NEURON: 0.15,
}


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Per-class durations in microseconds.

    For leaf classes the value is the leaf duration; for composite classes
    (GemmCall, GemmKernelPair, DenseNeuronGroup, DenseRemainderNeuron and the
    odd-K GemmRemainder block) it is the overhead span at the composite start.
    ``LayerGap`` is the silence between layers; ``pool_split_us`` the short
    silence between the two max-pool blocks.
    """

    durations: dict = field(default_factory=lambda: dict(DEFAULT_DURATIONS_US))
    pool_split_us: float = 2.0

    def __post_init__(self):
        merged = dict(DEFAULT_DURATIONS_US)
        merged.update({EventClass(k): float(v) for k, v in self.durations.items()})
        object.__setattr__(self, "durations", merged)
        bad = [k.value for k, v in merged.items() if not v > 0]
        if bad or not self.pool_split_us > 0:
            raise CostModelError(f"durations must be positive: {bad or ['pool_split_us']}")
        relu, tanh, sig = (merged[c] for c in (EventClass.ACT_RELU_ELEM, EventClass.ACT_TANH_ELEM,
                                               EventClass.ACT_SIGMOID_ELEM))
        if not relu < tanh < sig:
            raise CostModelError("activation costs must satisfy ReLU < Tanh < Sigmoid")

    def __getitem__(self, cls) -> float:
        return self.durations[EventClass(cls)]

    @property
    def layer_gap_us(self) -> float:
        return self.durations[EventClass.LAYER_GAP]

    def to_dict(self) -> dict:
        return {"durations": {k.value: v for k, v in self.durations.items()},
                "pool_split_us": self.pool_split_us}

    @classmethod
    def from_dict(cls, data: dict) -> "CostModel":
        unknown = set(data) - {"durations", "pool_split_us"}
        if unknown:
            raise CostModelError(f"unknown cost model fields {sorted(unknown)}")
        try:
            durations = {EventClass(k): v for k, v in data.get("durations", {}).items()}
        except ValueError as exc:
            raise CostModelError(str(exc)) from exc
        return cls(durations, float(data.get("pool_split_us", 2.0)))


class EventNode:
    """Timed event; times in microseconds."""

    __slots__ = ("label", "cls", "start", "duration", "children", "overhead")

    def __init__(self, label, cls, start, duration, children=None, overhead=0.0):
        self.label = label
        self.cls = cls
        self.start = start
        self.duration = duration
        self.children = children if children is not None else []
        self.overhead = overhead

    @property
    def end(self) -> float:
        return self.start + self.duration

    @property
    def is_leaf(self) -> bool:
        return not self.children and self.overhead == 0.0

    def __repr__(self):
        return (f"EventNode({self.label!r}, {self.cls.value}, start={self.start:.3f}, "
                f"duration={self.duration:.3f}, children={len(self.children)})")

    def iter(self):
        """Pre-order traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def count(self, cls) -> int:
        cls = EventClass(cls)
        return sum(1 for n in self.iter() if n.cls is cls)

    def children_of(self, cls) -> list:
        cls = EventClass(cls)
        return [c for c in self.children if c.cls is cls]

    def layers(self) -> list:
        """Layer composites of an inference root, in execution order."""
        return [c for c in self.children if c.cls is EventClass.COMPOSITE]

    def to_dict(self) -> dict:
        out = {"label": self.label, "class": self.cls.value, "start": self.start,
               "duration": self.duration}
        if self.overhead:
            out["overhead"] = self.overhead
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EventNode":
        return cls(data["label"], EventClass(data["class"]), float(data["start"]),
                   float(data["duration"]),
                   [cls.from_dict(c) for c in data.get("children", [])],
                   float(data.get("overhead", 0.0)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _leaves(label, cls, n, t, dur):
    return [EventNode(label, cls, t + i * dur, dur) for i in range(n)]


def _composite(label, cls, t, overhead, build):
    """Create a composite whose children are produced by ``build(t0)``."""
    children = build(t + overhead)
    end = children[-1].end if children else t + overhead
    return EventNode(label, cls, t, end - t, children, overhead)


def _mac_run(t, n_groups, has_rem, cost):
    t_mac = cost[EventClass.SIMD_MAC_GROUP]
    out = _leaves("simd_mac", EventClass.SIMD_MAC_GROUP, n_groups, t, t_mac)
    if has_rem:
        out.append(EventNode("col_remainder", EventClass.GEMM_REMAINDER, t + n_groups * t_mac,
                             cost[EventClass.GEMM_REMAINDER]))
    return out


def _gemm_call(t, k, n_groups, has_rem, cost):
    def build(t0):
        children = []
        for i in range(k // 2):
            pair = _composite("kernel_pair", EventClass.GEMM_KERNEL_PAIR, t0,
                              cost[EventClass.GEMM_KERNEL_PAIR],
                              lambda u: _mac_run(u, n_groups, has_rem, cost))
            children.append(pair)
            t0 = pair.end
        if k % 2:
            children.append(_composite("row_remainder", EventClass.GEMM_REMAINDER, t0,
                                       cost[EventClass.GEMM_REMAINDER],
                                       lambda u: _mac_run(u, n_groups, has_rem, cost)))
        return children

    return _composite("gemm", EventClass.GEMM_CALL, t, cost[EventClass.GEMM_CALL], build)


def emulate_conv(spec: ConvSpec, in_shape: TensorShape, cost: CostModel, t: float = 0.0,
                 label: str = "conv2d") -> EventNode:
    """Im2col + GeMM loop nest of one convolution layer.

    Two im2col columns feed each GeMM call; a trailing single-column call
    handles an odd number of output pixels.
    """
    h_out = layer_output_shape(spec, in_shape).h
    cols = h_out * h_out
    work = in_shape.c * spec.z * spec.z
    n_groups, has_rem = work // 4, work % 4 != 0
    t_col = cost[EventClass.IM2COL_COLUMN]
    children = []
    for _ in range(cols // 2):
        children.extend(_leaves("im2col", EventClass.IM2COL_COLUMN, 2, t, t_col))
        t += 2 * t_col
        call = _gemm_call(t, spec.k, n_groups, has_rem, cost)
        children.append(call)
        t = call.end
    if cols % 2:
        children.extend(_leaves("im2col", EventClass.IM2COL_COLUMN, 1, t, t_col))
        t += t_col
        tail = _composite("gemm_tail", EventClass.GEMM_CALL, t, cost[EventClass.GEMM_CALL],
                          lambda u: _leaves("col_tail", EventClass.GEMM_REMAINDER, spec.k, u,
                                            cost[EventClass.GEMM_REMAINDER]))
        children.append(tail)
        t = tail.end
    start = children[0].start
    node = EventNode(label, EventClass.COMPOSITE, start, t - start, children)
    return node


def emulate_maxpool(spec: MaxPoolSpec, in_shape: TensorShape, cost: CostModel, t: float = 0.0,
                    label: str = "maxpool") -> EventNode:
    h_in = in_shape.h
    h_out = layer_output_shape(spec, in_shape).h
    start = t
    block_x = _composite("pool_x", EventClass.COMPOSITE, t, 0.0,
                         lambda u: _leaves("pool_x_step", EventClass.POOL_X_STEP, h_in * h_out, u,
                                           cost[EventClass.POOL_X_STEP]))
    split = EventNode("pool_split", EventClass.LAYER_GAP, block_x.end, cost.pool_split_us)
    block_y = _composite("pool_y", EventClass.COMPOSITE, split.end, 0.0,
                         lambda u: _leaves("pool_y_step", EventClass.POOL_Y_STEP, h_out, u,
                                           cost[EventClass.POOL_Y_STEP]))
    return EventNode(label, EventClass.COMPOSITE, start, block_y.end - start, [block_x, split, block_y])


def emulate_dense(spec: DenseSpec, in_len: int, cost: CostModel, t: float = 0.0,
                  label: str = "dense") -> EventNode:
    """Neurons in groups of four, then the leftover neurons one by one."""
    if in_len < 1:
        raise ValueError("dense input length must be >= 1")
    cols = in_len // 4
    t_mac = cost[EventClass.DENSE_MAC_GROUP]
    start = t
    children = []
    for cls, label_, count in ((EventClass.DENSE_NEURON_GROUP, "neuron_group", spec.n_e // 4),
                               (EventClass.DENSE_REMAINDER_NEURON, "remainder_neuron", spec.n_e % 4)):
        for _ in range(count):
            node = _composite(label_, cls, t, cost[cls],
                              lambda u: _leaves("dense_mac", EventClass.DENSE_MAC_GROUP, cols, u, t_mac))
            children.append(node)
            t = node.end
    return EventNode(label, EventClass.COMPOSITE, start, t - start, children)


def emulate_activation(spec: ActivationSpec, n_elems: int, cost: CostModel, t: float = 0.0,
                       label: str | None = None) -> EventNode:
    if n_elems < 1:
        raise ValueError("activation needs at least one element")
    cls = ACTIVATION_CLASS[spec.kind]
    dur = cost[cls]
    children = _leaves(cls.value, cls, n_elems, t, dur)
    return EventNode(label or f"activation:{spec.kind.value}", EventClass.COMPOSITE, t,
                     children[-1].end - t, children)


def emulate_layer(layer, in_shape: TensorShape, cost: CostModel, t: float = 0.0,
                  label: str | None = None) -> EventNode:
    if isinstance(layer, ConvSpec):
        variant = resolved_variant(layer, in_shape).value
        return emulate_conv(layer, in_shape, cost, t, label or f"conv2d:{variant}")
    if isinstance(layer, MaxPoolSpec):
        return emulate_maxpool(layer, in_shape, cost, t, label or "maxpool")
    if isinstance(layer, DenseSpec):
        return emulate_dense(layer, in_shape.size, cost, t, label or "dense")
    if isinstance(layer, ActivationSpec):
        return emulate_activation(layer, in_shape.size, cost, t, label)
    raise TypeError(f"unknown layer {layer!r}")


def emulate_inference(arch: Architecture, cost: CostModel | None = None) -> EventNode:
    """Root node with one composite per layer, separated by LayerGap events."""
    cost = cost or CostModel()
    # the tree is acyclic; collector passes over ~1e5 fresh nodes only cost time
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _emulate_layers(arch, cost)
    finally:
        if was_enabled:
            gc.enable()


def _emulate_layers(arch: Architecture, cost: CostModel) -> EventNode:
    t = 0.0
    children = []
    for i, (layer, shape) in enumerate(zip(arch.layers, input_shapes(arch)), start=1):
        if children:
            gap = EventNode("layer_gap", EventClass.LAYER_GAP, t, cost.layer_gap_us)
            children.append(gap)
            t = gap.end
        node = emulate_layer(layer, shape, cost, t)
        node.label = f"L{i}:{node.label}"
        children.append(node)
        t = node.end
    return EventNode("inference", EventClass.COMPOSITE, 0.0, t, children)


# -- closed forms ---------------------------------------------------------------

def layer_duration(layer, in_shape: TensorShape, cost: CostModel) -> float:
    """Duration of :func:`emulate_layer` without building the tree."""
    c = cost
    if isinstance(layer, ConvSpec):
        h_out = layer_output_shape(layer, in_shape).h
        cols = h_out * h_out
        work = in_shape.c * layer.z ** 2
        run = (work // 4) * c[EventClass.SIMD_MAC_GROUP] + (work % 4 != 0) * c[EventClass.GEMM_REMAINDER]
        call = (c[EventClass.GEMM_CALL] + (layer.k // 2) * (c[EventClass.GEMM_KERNEL_PAIR] + run)
                + (layer.k % 2) * (c[EventClass.GEMM_REMAINDER] + run))
        tail = c[EventClass.GEMM_CALL] + layer.k * c[EventClass.GEMM_REMAINDER]
        return cols * c[EventClass.IM2COL_COLUMN] + (cols // 2) * call + (cols % 2) * tail
    if isinstance(layer, MaxPoolSpec):
        h_out = in_shape.h // layer.z_pool
        return (in_shape.h * h_out * c[EventClass.POOL_X_STEP] + c.pool_split_us
                + h_out * c[EventClass.POOL_Y_STEP])
    if isinstance(layer, DenseSpec):
        body = (in_shape.size // 4) * c[EventClass.DENSE_MAC_GROUP]
        return ((layer.n_e // 4) * (c[EventClass.DENSE_NEURON_GROUP] + body)
                + (layer.n_e % 4) * (c[EventClass.DENSE_REMAINDER_NEURON] + body))
    if isinstance(layer, ActivationSpec):
        return in_shape.size * c[ACTIVATION_CLASS[layer.kind]]
    raise TypeError(f"unknown layer {layer!r}")


def estimate_duration(arch: Architecture, cost: CostModel | None = None) -> float:
    cost = cost or CostModel()
    shapes = input_shapes(arch)
    body = sum(layer_duration(l, s, cost) for l, s in zip(arch.layers, shapes))
    return body + max(len(arch.layers) - 1, 0) * cost.layer_gap_us


def summarize(root: EventNode) -> list:
    """Per-layer duration and pattern counts of an inference tree."""
    rows = []
    for node in root.layers():
        row = {"layer": node.label, "start_us": round(node.start, 6),
               "duration_us": round(node.duration, 6)}
        kind = node.label.split(":", 1)[1] if ":" in node.label else node.label
        if kind.startswith("conv2d"):
            calls = node.children_of(EventClass.GEMM_CALL)
            row["gemm_calls"] = len(calls)
            row["kernel_pairs_per_call"] = len(calls[0].children_of(EventClass.GEMM_KERNEL_PAIR))
            pairs = calls[0].children_of(EventClass.GEMM_KERNEL_PAIR)
            row["mac_groups_per_pair"] = len(pairs[0].children_of(EventClass.SIMD_MAC_GROUP)) if pairs else 0
        elif kind.startswith("maxpool"):
            row["pool_x_steps"] = node.children[0].count(EventClass.POOL_X_STEP)
            row["pool_y_steps"] = node.children[2].count(EventClass.POOL_Y_STEP)
        elif kind.startswith("dense"):
            row["neuron_groups"] = len(node.children_of(EventClass.DENSE_NEURON_GROUP))
            row["remainder_neurons"] = len(node.children_of(EventClass.DENSE_REMAINDER_NEURON))
        else:
            row["elements"] = len(node.children)
        rows.append(row)
    return rows
