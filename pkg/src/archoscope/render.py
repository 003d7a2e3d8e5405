"""Turn an event tree into a sampled, noisy trace.

Every leaf (and every composite overhead span) becomes a burst: the class
amplitude times a sinusoid at the class carrier period, with short
raised-cosine ramps so consecutive events of one class stay countable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .emulator import CLASS_CODES, EventClass, EventNode

# amplitudes in dB relative to SimdMacGroup, pairwise 2 dB apart
DEFAULT_AMPLITUDE_DB = {
    EventClass.GEMM_CALL: -10.0,
    EventClass.GEMM_REMAINDER: -8.0,
    EventClass.POOL_X_STEP: -6.0,
    EventClass.IM2COL_COLUMN: -4.0,
    EventClass.ACT_TANH_ELEM: -2.0,
    EventClass.SIMD_MAC_GROUP: 0.0,
    EventClass.DENSE_MAC_GROUP: 2.0,
    EventClass.ACT_SIGMOID_ELEM: 4.0,
    EventClass.ACT_RELU_ELEM: 6.0,
    EventClass.POOL_Y_STEP: 8.0,
    EventClass.DENSE_REMAINDER_NEURON: 10.0,
    EventClass.GEMM_KERNEL_PAIR: 12.0,
    EventClass.DENSE_NEURON_GROUP: 14.0,
}

# carrier periods in samples; spikes are high-frequency, MAC bodies slower
DEFAULT_CARRIER = {
    EventClass.GEMM_CALL: 6.0,
    EventClass.GEMM_REMAINDER: 7.0,
    EventClass.POOL_X_STEP: 12.0,
    EventClass.IM2COL_COLUMN: 14.0,
    EventClass.ACT_TANH_ELEM: 8.0,
    EventClass.SIMD_MAC_GROUP: 10.0,
    EventClass.DENSE_MAC_GROUP: 9.0,
    EventClass.ACT_SIGMOID_ELEM: 11.0,
    EventClass.ACT_RELU_ELEM: 5.0,
    EventClass.POOL_Y_STEP: 16.0,
    EventClass.DENSE_REMAINDER_NEURON: 4.0,
    EventClass.GEMM_KERNEL_PAIR: 3.0,
    EventClass.DENSE_NEURON_GROUP: 3.0,
}

MIN_EVENT_SAMPLES = 8


class RenderError(ValueError):
    pass


class SampleRateTooLow(RenderError):
    pass


def _db(v):
    return float(10 ** (v / 20.0))


DEFAULT_AMPLITUDES = {k: _db(v) for k, v in DEFAULT_AMPLITUDE_DB.items()}
MIN_CLASS_AMPLITUDE = min(DEFAULT_AMPLITUDES.values())


@dataclass(frozen=True)
class RenderParams:
    sample_rate: float = 200e6
    amplitudes: dict = field(default_factory=lambda: dict(DEFAULT_AMPLITUDES))
    carriers: dict = field(default_factory=lambda: dict(DEFAULT_CARRIER))
    noise_sigma: float = 0.2 * MIN_CLASS_AMPLITUDE
    n_average: int = 16
    rng_seed: int = 1
    ramp_samples: int = 4
    # idle capture before and after the inference (oscilloscope pre/post trigger)
    idle_fraction: float = 0.08
    idle_min_us: float = 50.0

    def __post_init__(self):
        amps = dict(DEFAULT_AMPLITUDES)
        amps.update({EventClass(k): float(v) for k, v in self.amplitudes.items()})
        carriers = dict(DEFAULT_CARRIER)
        carriers.update({EventClass(k): float(v) for k, v in self.carriers.items()})
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "carriers", carriers)
        if self.n_average < 1:
            raise RenderError("n_average must be >= 1")
        if self.noise_sigma < 0:
            raise RenderError("noise_sigma must be >= 0")
        if self.sample_rate <= 0:
            raise RenderError("sample_rate must be positive")
        if any(p < 2 for p in carriers.values()):
            raise RenderError("carrier periods must be >= 2 samples")

    @property
    def min_amplitude(self) -> float:
        return min(self.amplitudes.values())

    @property
    def residual_sigma(self) -> float:
        return self.noise_sigma / np.sqrt(self.n_average)

    def idle_us(self, duration_us: float) -> float:
        return max(self.idle_min_us, self.idle_fraction * duration_us)

    def replace(self, **changes) -> "RenderParams":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return RenderParams(**data)

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "amplitudes": {k.value: v for k, v in self.amplitudes.items()},
            "carriers": {k.value: v for k, v in self.carriers.items()},
            "noise_sigma": self.noise_sigma,
            "n_average": self.n_average,
            "rng_seed": self.rng_seed,
            "ramp_samples": self.ramp_samples,
            "idle_fraction": self.idle_fraction,
            "idle_min_us": self.idle_min_us,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RenderParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise RenderError(f"unknown render fields {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise RenderError(str(exc)) from exc


@dataclass
class Trace:
    sample_rate: float
    samples: np.ndarray
    annotation: EventNode | None = None
    # time of the annotation's t=0 within the capture
    offset_us: float = 0.0

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("trace samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def samples_per_us(self) -> float:
        return self.sample_rate * 1e-6

    @property
    def duration_us(self) -> float:
        return len(self.samples) / self.samples_per_us

    def index(self, t_us: float) -> int:
        """Sample index of an annotation time."""
        return int(round((t_us + self.offset_us) * self.samples_per_us))

    def span(self, node: EventNode) -> tuple:
        return self.index(node.start), self.index(node.end)


def flatten_spans(root: EventNode):
    """Rendered spans ``(start_us, duration_us, class_code)`` in time order."""
    starts, durs, codes = [], [], []
    silent = (EventClass.LAYER_GAP, EventClass.COMPOSITE)
    stack = [root]
    while stack:
        node = stack.pop()
        if node.cls not in silent:
            if node.overhead > 0:
                starts.append(node.start)
                durs.append(node.overhead)
                codes.append(CLASS_CODES[node.cls])
            elif not node.children:
                starts.append(node.start)
                durs.append(node.duration)
                codes.append(CLASS_CODES[node.cls])
        stack.extend(reversed(node.children))
    return (np.asarray(starts, dtype=np.float64), np.asarray(durs, dtype=np.float64),
            np.asarray(codes, dtype=np.int64))


def render_trace(root: EventNode, params: RenderParams | None = None) -> Trace:
    """Render ``root`` and average ``n_average`` noisy acquisitions."""
    params = params or RenderParams()
    spu = params.sample_rate * 1e-6
    idle = params.idle_us(root.duration)
    starts_us, durs_us, codes = flatten_spans(root)
    first = np.rint((starts_us + idle) * spu).astype(np.int64)
    last = np.rint((starts_us + durs_us + idle) * spu).astype(np.int64)
    lengths = last - first
    if len(lengths) and lengths.min() < MIN_EVENT_SAMPLES:
        raise SampleRateTooLow(
            f"shortest event spans {int(lengths.min())} samples at {params.sample_rate:g} S/s "
            f"(need >= {MIN_EVENT_SAMPLES})")
    n = int(np.rint((root.duration + 2 * idle) * spu))
    amp_table = np.zeros(len(CLASS_CODES))
    period_table = np.full(len(CLASS_CODES), 4.0)
    for cls, code in CLASS_CODES.items():
        if cls in params.amplitudes:
            amp_table[code] = params.amplitudes[cls]
            period_table[code] = params.carriers[cls]
    out = np.zeros(n, dtype=np.float32)
    kernels.render_spans(out, first, lengths, amp_table[codes], period_table[codes],
                         int(params.ramp_samples))
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.rng_seed)
        acc = np.zeros(n, dtype=np.float32)
        for _ in range(params.n_average):
            acc += rng.standard_normal(n, dtype=np.float32)
        out += acc * np.float32(params.noise_sigma / params.n_average)
    return Trace(params.sample_rate, out, root, idle)
