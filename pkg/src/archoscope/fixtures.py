"""Reference models and a random architecture sampler.

The three reference models plus the remainder-oriented MLP. Dense widths
and head layers are reconstructions consistent with their known pattern counts.
"""

from __future__ import annotations

import numpy as np

from .model import (
    ActivationKind,
    ActivationSpec,
    Architecture,
    ConvSpec,
    DenseSpec,
    MaxPoolSpec,
    ShapeError,
    TensorShape,
    layer_output_shape,
)

RELU = ActivationSpec(ActivationKind.RELU)
SOFTMAX = ActivationSpec(ActivationKind.SOFTMAX)


def mnist_mlp() -> Architecture:
    return Architecture(
        TensorShape(28, 1),
        (DenseSpec(32), RELU, DenseSpec(16), RELU, DenseSpec(10), SOFTMAX),
    )


def mnist_cnn() -> Architecture:
    return Architecture(
        TensorShape(28, 1),
        (
            ConvSpec(k=16, z=3, s=1, p=1), RELU, MaxPoolSpec(2),
            ConvSpec(k=32, z=3, s=1, p=1), RELU, MaxPoolSpec(2),
            DenseSpec(16), SOFTMAX,
        ),
    )


def cifar_cnn() -> Architecture:
    return Architecture(
        TensorShape(32, 3),
        (
            ConvSpec(k=16, z=3, s=1, p=1), RELU, MaxPoolSpec(2),
            ConvSpec(k=32, z=3, s=1, p=1), RELU, MaxPoolSpec(2),
            ConvSpec(k=64, z=3, s=1, p=1), RELU, MaxPoolSpec(2),
            DenseSpec(32), RELU, DenseSpec(10), SOFTMAX,
        ),
    )


def sp_mlp() -> Architecture:
    return Architecture(
        TensorShape(28, 1),
        (DenseSpec(23), RELU, DenseSpec(18), RELU, DenseSpec(13), RELU, DenseSpec(10), SOFTMAX),
    )


REFERENCE_MODELS = {
    "mnist_mlp": mnist_mlp,
    "mnist_cnn": mnist_cnn,
    "cifar_cnn": cifar_cnn,
    "sp_mlp": sp_mlp,
}


def _stride_padding_unique(h_in: int, h_out: int, z: int) -> bool:
    from .extraction import MultipleSolutions, NoSolution, solve_stride_padding

    try:
        solve_stride_padding(h_in, h_out, z)
    except (MultipleSolutions, NoSolution):
        return False
    return True


def random_architecture(rng: np.random.Generator, max_layers: int = 12,
                        max_duration_us: float | None = 8000.0, cost=None) -> Architecture:
    """Draw an architecture from the supported grammar.

    Grammar: an optional conv stack (Z in {1,3,5}, K in [2,64], even output
    side, pools with z_pool=2) followed by a dense head (N_e in [4,256]),
    activations ReLU or Sigmoid after any conv/dense. Convolutions whose
    (S,P) cannot be recovered uniquely from shapes are redrawn, and so are
    architectures whose emulated duration exceeds ``max_duration_us``.
    """
    from .emulator import CostModel, estimate_duration

    cost = cost or CostModel()
    for _ in range(1000):
        arch = _draw(rng, max_layers)
        if arch is None:
            continue
        if max_duration_us is None or estimate_duration(arch, cost) <= max_duration_us:
            return arch
    raise RuntimeError("could not draw an architecture within the duration budget")


def _draw(rng, max_layers):
    h = int(rng.choice([4, 6, 8, 10, 12, 16]))
    c = int(rng.choice([1, 2, 3, 4]))
    shape = TensorShape(h, c)
    layers = []
    want = int(rng.integers(1, max_layers + 1))
    n_conv = int(rng.integers(0, 4)) if want > 1 else int(rng.integers(0, 2))

    def act():
        return ActivationSpec(ActivationKind.RELU if rng.random() < 0.6 else ActivationKind.SIGMOID)

    for _ in range(n_conv):
        if len(layers) >= want:
            break
        conv = _draw_conv(rng, shape)
        if conv is None:
            break
        layers.append(conv)
        shape = layer_output_shape(conv, shape)
        if len(layers) < want and rng.random() < 0.7:
            layers.append(act())
        if len(layers) < want and shape.h % 2 == 0 and shape.h >= 4 and rng.random() < 0.5:
            layers.append(MaxPoolSpec(2))
            shape = layer_output_shape(layers[-1], shape)
    while len(layers) < want:
        n_e = int(rng.integers(4, 257))
        layers.append(DenseSpec(n_e))
        shape = layer_output_shape(layers[-1], shape)
        if len(layers) < want and rng.random() < 0.7:
            layers.append(act())
    if not layers:
        return None
    try:
        return Architecture(TensorShape(h, c), tuple(layers))
    except ShapeError:
        return None


def _draw_conv(rng, shape):
    options = []
    for z in (1, 3, 5):
        for s in (1, 2):
            for p in range(z):
                span = shape.h - z + 2 * p
                if span < 0 or span % s:
                    continue
                h_out = span // s + 1
                if h_out < 2 or h_out % 2 or h_out > 16:
                    continue
                if not _stride_padding_unique(shape.h, h_out, z):
                    continue
                options.append((z, s, p))
    if not options:
        return None
    z, s, p = options[int(rng.integers(len(options)))]
    return ConvSpec(k=int(rng.integers(2, 65)), z=z, s=s, p=p)
