"""Blind recovery of an architecture from a trace.

The pipeline splits the trace into layers, classifies each layer by its
event signature and duration, then inverts the loop-count closed forms:
GeMM calls give ``H_out``, kernel-pair spikes per call give ``K``, MAC
groups per pair give ``Z``, and shapes give ``(S, P)``. Every decision is
cross-checked against the calibration cost model; disagreement lowers the
confidence instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import nnls

from .emulator import ACTIVATION_CLASS, CostModel, EventClass, layer_duration
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
    select_conv_variant,
)
from .render import MIN_CLASS_AMPLITUDE, Trace
from .signal import (
    NoActivityDetected,
    NoPeriodicity,
    Segment,
    count_patterns,
    detect_spikes,
    envelope,
    moving_rms,
    noise_floor,
    refine_edges,
    segment_boundaries,
    spectrogram,
)


class ExtractionError(ValueError):
    pass


class AmbiguousKernelSize(ExtractionError):
    def __init__(self, msg, candidates=()):
        super().__init__(msg)
        self.candidates = list(candidates)


class InconsistentCounts(ExtractionError):
    pass


class BlocksNotFound(ExtractionError):
    pass


class NoSolution(ExtractionError):
    pass


class MultipleSolutions(ExtractionError):
    def __init__(self, msg, solutions=None, conventional=None):
        super().__init__(msg)
        # None when the stride is unbounded
        self.solutions = solutions
        self.conventional = conventional


class LayerKind(str, Enum):
    CONV = "conv2d"
    DENSE = "dense"
    MAXPOOL = "maxpool"
    ACTIVATION = "activation"
    UNKNOWN = "unknown"


SIGMOID_OR_TANH = "sigmoid_or_tanh"
SPIKE_SMOOTH = 8


@dataclass(frozen=True)
class Thresholds:
    """Detector parameters; defaults calibrated on the fixture suite."""

    k_sigma: float = 3.0
    min_gap_us: float = 20.0
    env_window: int = 128
    env_hop: int = 64
    use_spectrogram: bool = True
    spec_window: int = 64
    spec_hop: int = 64
    min_significance: float = 8.0
    prominence_min: float = 0.2
    confidence_floor: float = 0.5
    count_disagreement: float = 0.05
    dense_min_input: int = 64
    low_input_confidence: float = 0.4
    pool_split_min_us: float = 0.5
    timing_tolerance: float = 0.005
    timing_tolerance_samples: float = 6.0
    duration_tolerance: float = 0.01
    min_class_amplitude: float = MIN_CLASS_AMPLITUDE
    noise_ok_ratio: float = 0.3
    noise_max_ratio: float = 1.0
    relu_cutoff_us: float | None = None
    max_stride: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Thresholds":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown threshold fields {sorted(unknown)}")
        return cls(**data)


@dataclass
class LayerHypothesis:
    kind: LayerKind
    segment: Segment
    params: dict = field(default_factory=dict)
    pattern_counts: dict = field(default_factory=dict)
    confidence: float = 0.0
    notes: list = field(default_factory=list)
    error: str | None = None

    def to_layer(self):
        """Layer spec built from the recovered parameters, or None."""
        p = self.params
        try:
            if self.kind is LayerKind.CONV:
                return ConvSpec(k=p["k"], z=p["z"], s=p["s"], p=p["p"])
            if self.kind is LayerKind.DENSE:
                return DenseSpec(p["n_e"])
            if self.kind is LayerKind.MAXPOOL:
                return MaxPoolSpec(p["z_pool"])
            if self.kind is LayerKind.ACTIVATION:
                kind = ActivationKind.RELU if p["kind"] == "relu" else ActivationKind.SIGMOID
                return ActivationSpec(kind)
        except (KeyError, ShapeError):
            return None
        return None

    def to_dict(self, sample_rate: float | None = None) -> dict:
        seg = {"start": self.segment.start, "end": self.segment.end}
        if sample_rate:
            seg["start_us"] = round(self.segment.start / sample_rate * 1e6, 4)
            seg["duration_us"] = round(len(self.segment) / sample_rate * 1e6, 4)
        return {
            "kind": self.kind.value,
            "params": self.params,
            "pattern_counts": self.pattern_counts,
            "confidence": round(float(self.confidence), 4),
            "segment": seg,
            "notes": self.notes,
            "error": self.error,
        }


@dataclass
class ExtractionReport:
    input_shape: TensorShape
    sample_rate: float
    hypotheses: list = field(default_factory=list)
    recovered: Architecture | None = None
    best_guess: Architecture | None = None
    prior_used: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    noise: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def resolved(self) -> bool:
        return self.recovered is not None

    def to_dict(self) -> dict:
        return {
            "input_shape": {"h": self.input_shape.h, "c": self.input_shape.c},
            "layer_count": len(self.hypotheses),
            "resolved": self.resolved,
            "hypotheses": [h.to_dict(self.sample_rate) for h in self.hypotheses],
            "recovered": self.recovered.to_dict() if self.recovered else None,
            "best_guess": self.best_guess.to_dict() if self.best_guess else None,
            "prior_used": self.prior_used,
            "errors": self.errors,
            "noise": self.noise,
            "config": self.config,
        }


class _Timing:
    """Calibrated event durations in samples."""

    def __init__(self, cost: CostModel, spu: float):
        def g(cls):
            return cost[cls] * spu

        self.spu = spu
        self.im2col = g(EventClass.IM2COL_COLUMN)
        self.call = g(EventClass.GEMM_CALL)
        self.pair = g(EventClass.GEMM_KERNEL_PAIR)
        self.mac = g(EventClass.SIMD_MAC_GROUP)
        self.rem = g(EventClass.GEMM_REMAINDER)
        self.setup = 2 * self.im2col + self.call
        self.dmac = g(EventClass.DENSE_MAC_GROUP)
        self.group = g(EventClass.DENSE_NEURON_GROUP)
        self.rneuron = g(EventClass.DENSE_REMAINDER_NEURON)
        self.pool_x = g(EventClass.POOL_X_STEP)
        self.pool_y = g(EventClass.POOL_Y_STEP)
        self.pool_split = cost.pool_split_us * spu


def _tol(th: Thresholds, value: float) -> float:
    return th.timing_tolerance_samples + th.timing_tolerance * abs(value)


def _duration_factor(pred_us: float, meas_us: float, th: Thresholds, spu: float) -> float:
    """1 when the measured duration matches the prediction, falling to 0 at 5x tolerance."""
    err = abs(pred_us - meas_us)
    tol = th.duration_tolerance * pred_us + 2 * th.timing_tolerance_samples / spu
    return float(np.clip(1.0 - max(err - tol, 0.0) / (4 * tol), 0.0, 1.0))


# -- stride / padding ---------------------------------------------------------

def solve_stride_padding(h_in: int, h_out: int, z: int, max_stride: int | None = None) -> tuple:
    """Unique ``(s, p)`` with ``0 <= p < z`` reproducing ``h_out`` from ``h_in``.

    Raises :class:`NoSolution` or :class:`MultipleSolutions`. For ``h_out ==
    1`` the stride is unconstrained; without ``max_stride`` the conventional
    choice ``s = z - 2p`` is attached to the raised error.
    """
    if h_in < 1 or h_out < 1 or z < 1:
        raise NoSolution(f"invalid sizes h_in={h_in} h_out={h_out} z={z}")
    if h_out == 1:
        pads = [p for p in range(z) if h_in - z + 2 * p == 0]
        if not pads:
            raise NoSolution(f"no padding maps {h_in} to 1 with z={z}")
        p = pads[0]
        conventional = (max(z - 2 * p, 1), p)
        if max_stride is None:
            raise MultipleSolutions("stride unconstrained for h_out=1", None, conventional)
        sols = [(s, p) for s in range(1, max_stride + 1)]
        if len(sols) == 1:
            return sols[0]
        raise MultipleSolutions(f"{len(sols)} strides fit h_out=1", sols, conventional)
    sols = []
    for p in range(z):
        span = h_in - z + 2 * p
        if span <= 0 or span % (h_out - 1):
            continue
        s = span // (h_out - 1)
        if max_stride is None or s <= max_stride:
            sols.append((s, p))
    if not sols:
        raise NoSolution(f"no (s, p) maps {h_in} to {h_out} with z={z}")
    if len(sols) > 1:
        raise MultipleSolutions(f"several (s, p) map {h_in} to {h_out} with z={z}: {sols}", sols)
    return sols[0]


def kernel_size_from_groups(c_in: int, n_groups: int, z_max: int | None = None) -> int:
    """Unique ``z`` minimising ``|floor(c_in z^2 / 4) - n_groups|``."""
    if z_max is None:
        z_max = 1
        while (c_in * z_max * z_max) // 4 <= n_groups:
            z_max += 1
    errs = {z: abs((c_in * z * z) // 4 - n_groups) for z in range(1, z_max + 1)}
    best = min(errs.values())
    winners = [z for z, e in errs.items() if e == best]
    if len(winners) > 1:
        raise AmbiguousKernelSize(f"kernel sizes {winners} fit {n_groups} groups with c_in={c_in}", winners)
    return winners[0]


# -- segmentation -------------------------------------------------------------

def _segments_and_noise(trace: Trace, th: Thresholds):
    env = envelope(trace, th.env_window, th.env_hop)
    spec = spectrogram(trace, th.spec_window, th.spec_hop) if th.use_spectrogram else None
    base, _ = noise_floor(env)
    raw = segment_boundaries(env, spec, th.min_gap_us, th.k_sigma, th.min_significance, trace.samples)
    level = 4.0 * base + 1e-9
    out = []
    for seg in raw:
        seg = refine_edges(trace, seg, level, th.env_window)
        if out and seg.start < out[-1].end:
            seg = Segment(out[-1].end, max(seg.end, out[-1].end + 1))
        out.append(seg)
    return out, base


def split_layers(trace: Trace, thresholds: Thresholds | None = None) -> list:
    """Layer segments in time order."""
    if len(trace.samples) == 0:
        raise NoActivityDetected("empty trace")
    return _segments_and_noise(trace, thresholds or Thresholds())[0]


def _internal_silence(trace, seg, level, min_len):
    x = np.asarray(trace.samples[seg.start:seg.end], dtype=np.float64)
    quiet = moving_rms(x, 16) < level
    m = np.concatenate(([False], quiet, [False])).astype(np.int8)
    d = np.diff(m)
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    longest = None
    for s, e in zip(starts, ends):
        if e - s >= min_len and s > 0 and e < len(x):
            if longest is None or e - s > longest[1] - longest[0]:
                longest = (s, e)
    if longest is None:
        return None
    return Segment(seg.start + int(longest[0]), seg.start + int(longest[1]))


# -- per-kind extractors ------------------------------------------------------

def _cluster_calls(spikes, t):
    gaps = np.diff(spikes)
    split = gaps > gaps.min() + 0.5 * t.setup
    if not split.any():
        # equal gaps: one kernel pair per call
        return [spikes[i:i + 1] for i in range(len(spikes))]
    cut = np.flatnonzero(split) + 1
    return np.split(spikes, cut)


def _decode_run(run, t, tol, slack=3.0):
    """``(n, r)`` with ``n * mac + r * rem`` within ``tol`` of ``run`` and near the best fit."""
    cands = []
    for r in (0, 1):
        n = int(round((run - r * t.rem) / t.mac))
        if n >= 0:
            cands.append((abs(n * t.mac + r * t.rem - run), n, r))
    if not cands:
        return []
    best = min(c[0] for c in cands)
    return [(n, r) for err, n, r in cands if err <= tol and err <= best + slack]


def _kernel_fits(c_in, n, r):
    z = 1
    while (c_in * z * z) // 4 <= n:
        if (c_in * z * z) // 4 == n and bool((c_in * z * z) % 4) == bool(r):
            return True
        z += 1
    return False


def _average_windows(x, starts, length):
    starts = [s for s in starts if s >= 0 and s + length <= len(x)]
    if not starts or length < 1:
        return None
    acc = np.zeros(length)
    for s in starts:
        acc += x[s:s + length]
    return acc / len(starts)


def _call_template(n, r, odd, n_pairs, t, pre):
    """Class index per sample for one GeMM call, starting ``pre`` samples before the first spike."""
    S, M, R, I, C = range(5)
    seq = [(C, pre)]
    run = [(M, t.mac)] * n + ([(R, t.rem)] if r else [])
    for _ in range(n_pairs):
        seq += [(S, t.pair)] + run
    if odd:
        seq += [(R, t.rem)] + run
    seq += [(I, 2 * t.im2col), (C, t.call)]
    labels = []
    pos = 0.0
    for cls, dur in seq:
        end = pos + dur
        labels.extend([cls] * (int(round(end)) - int(round(pos))))
        pos = end
    return np.asarray(labels)


def _fit_templates(energy, candidates, n_pairs, t, pre):
    """Residual of a nonnegative per-class level fit for each candidate call layout.

    Samples near kernel-pair spikes sit at the same place in every layout
    and their ramped shape fits no flat level, so they are left out.
    """
    w = 16
    kernel = np.ones(w) / w
    e = np.convolve(energy, kernel, mode="same")
    templates = [_call_template(n, r, odd, n_pairs, t, pre) for n, r, odd in candidates]
    m = min(len(e), *(len(l) for l in templates))
    spike = np.zeros(m, dtype=bool)
    for labels in templates:
        spike |= labels[:m] == 0
    keep = np.convolve(spike, np.ones(2 * w + 1), mode="same")[:m] == 0
    out = []
    for labels in templates:
        A = np.zeros((m, 5))
        A[np.arange(m), labels[:m]] = 1.0
        A = np.stack([np.convolve(A[:, j], kernel, mode="same") for j in range(5)], axis=1)
        _, res = nnls(A[keep], e[:m][keep])
        out.append(res / (np.linalg.norm(e[:m][keep]) + 1e-12))
    return np.asarray(out)


def extract_conv(trace: Trace, seg: Segment, c_in: int, h_in: int, cost: CostModel | None = None,
                 thresholds: Thresholds | None = None) -> LayerHypothesis:
    """Recover ``(K, Z, S, P)`` and ``H_out`` of a convolution segment."""
    cost = cost or CostModel()
    th = thresholds or Thresholds()
    t = _Timing(cost, trace.samples_per_us)
    hyp = LayerHypothesis(LayerKind.CONV, seg)
    min_dist = max(2, int(0.5 * (t.pair + min(t.mac, t.rem))))
    spikes = detect_spikes(trace, seg, th.k_sigma, min_distance=min_dist, smooth=SPIKE_SMOOTH)
    if len(spikes) < 2:
        raise InconsistentCounts(f"found {len(spikes)} kernel-pair spikes, need at least two")
    calls = _cluster_calls(spikes, t)
    per_call = np.array([len(c) for c in calls])
    n_p1 = int(np.bincount(per_call).argmax())
    bad = float(np.mean(per_call != n_p1))
    if bad > th.count_disagreement:
        raise InconsistentCounts(f"pairs per call disagree in {bad:.1%} of {len(calls)} calls")
    conf = 1.0 - bad
    starts = np.array([c[0] for c in calls])
    peak_off = float(spikes[0] - seg.start - t.setup)
    p_call = float(np.median(np.diff(starts))) if len(starts) > 1 else None

    candidates = []
    if n_p1 >= 2:
        intra = np.concatenate([np.diff(c) for c in calls if len(c) > 1])
        d_pair = float(np.median(intra))
        for n, r in _decode_run(d_pair - t.pair, t, _tol(th, d_pair)):
            run = n * t.mac + r * t.rem
            for odd in (0, 1):
                pred = t.setup + n_p1 * (t.pair + run) + odd * (t.rem + run)
                if p_call is None or abs(pred - p_call) <= _tol(th, p_call):
                    candidates.append((n, r, odd))
    elif p_call is not None:
        for odd in (0, 1):
            run = (p_call - t.setup - t.pair - odd * t.rem) / (1 + odd)
            for n, r in _decode_run(run, t, _tol(th, p_call) / (1 + odd)):
                candidates.append((n, r, odd))
    if not candidates:
        raise InconsistentCounts("call timing matches no GeMM loop layout")
    # a run must come from a real kernel: n = floor(c z^2 / 4), remainder iff c z^2 % 4
    realisable = [c for c in candidates if _kernel_fits(c_in, c[0], c[1])]
    if realisable:
        candidates = realisable
    if len(candidates) > 1:
        x = np.asarray(trace.samples, dtype=np.float64)
        pre = int(t.call // 2)
        length = int(round(p_call)) if p_call else int(seg.end - starts[-1])
        grid = starts[:-1].astype(np.float64)
        if len(grid) >= 3:
            # calls are strictly periodic; a fitted grid averages out spike jitter
            idx = np.arange(len(grid))
            slope, icpt = np.polyfit(idx, grid, 1)
            grid = icpt + slope * idx
        prof = _average_windows(x * x, [int(round(s - peak_off)) - pre for s in grid], length)
        res = _fit_templates(prof, candidates, n_p1, t, pre)
        order = np.argsort(res)
        best, second = res[order[0]], res[order[1]]
        hyp.notes.append(f"call layout chosen by template fit among {len(candidates)} timing-equivalent layouts")
        conf *= float(np.clip((second - best) / max(second, 1e-12) * 4, 0.0, 1.0))
        candidates = [candidates[order[0]]]
    n, r, odd = candidates[0]
    k = 2 * n_p1 + odd

    # trailing single-column call when H_out^2 is odd
    run = n * t.mac + r * t.rem
    after_last = (t.pair - peak_off) + run + odd * (t.rem + run) + (n_p1 - per_call[-1]) * (t.pair + run)
    extra = (seg.end - spikes[-1]) - after_last
    n_calls = len(calls)
    tail = False
    if extra > 0.5 * (t.im2col + t.call):
        expect = t.im2col + t.call + k * t.rem
        if abs(extra - expect) > _tol(th, expect):
            conf *= 0.5
            hyp.notes.append(f"trailing activity of {extra:.0f} samples does not match a tail call")
        tail = True
        n_calls += 1
    h_out = int(round(math.sqrt(2 * n_calls)))
    expected_calls = h_out * h_out // 2 + (h_out * h_out) % 2
    if expected_calls != n_calls or bool((h_out * h_out) % 2) != tail:
        conf *= 0.3
        hyp.notes.append(f"{n_calls} calls is not the call count of a square output")

    z = kernel_size_from_groups(c_in, n)
    if ((c_in * z * z) % 4 != 0) != bool(r):
        conf *= 0.5
        hyp.notes.append("column remainder signature disagrees with the recovered kernel size")

    counted = None
    if n_p1 >= 2 and n >= 3:
        # count MAC groups inside a few pair bodies, between consecutive onsets
        onsets = detect_spikes(trace, seg, th.k_sigma, min_distance=min_dist, smooth=SPIKE_SMOOTH, align="onset")
        bodies = [(a + int(round(t.pair)), b) for a, b in zip(onsets[:-1], onsets[1:])
                  if abs((b - a) - (t.pair + run)) <= _tol(th, b - a)][:5]
        votes = []
        for a, b in bodies:
            # no pattern is shorter than half a MAC group
            most = max(1, int((b - a) / (0.5 * t.mac)))
            try:
                votes.append(count_patterns(trace, Segment(a, b), expected_range=(1, most),
                                            prominence_min=th.prominence_min).count)
            except NoPeriodicity:
                pass
        if votes:
            counted = int(np.bincount(votes).argmax())
        if counted is not None and counted != n:
            conf *= 0.8
            hyp.notes.append(f"autocorrelation counts {counted} MAC groups, timing gives {n}")

    try:
        s, p = solve_stride_padding(h_in, h_out, z, th.max_stride)
    except MultipleSolutions as exc:
        if exc.conventional is None:
            raise
        s, p = exc.conventional
        conf *= 0.4
        hyp.notes.append(str(exc))
    spec = ConvSpec(k=k, z=z, s=s, p=p)
    meas_us = len(seg) / t.spu
    pred_us = layer_duration(spec, TensorShape(h_in, c_in), cost)
    conf *= _duration_factor(pred_us, meas_us, th, t.spu)
    hyp.params = {"k": k, "z": z, "s": s, "p": p, "h_out": h_out,
                  "variant": select_conv_variant(c_in, k).value}
    hyp.pattern_counts = {"gemm_calls": n_calls, "kernel_pairs_per_call": n_p1,
                          "mac_groups_per_pair": n, "column_remainder": bool(r),
                          "row_remainder": bool(odd), "tail_call": tail,
                          "mac_groups_counted": counted}
    hyp.confidence = conf
    return hyp


def extract_maxpool(trace: Trace, seg: Segment, h_in: int, cost: CostModel | None = None,
                    thresholds: Thresholds | None = None, level: float | None = None) -> LayerHypothesis:
    """Recover ``H_out`` from the second pooling block and derive ``z_pool = h_in / H_out``."""
    cost = cost or CostModel()
    th = thresholds or Thresholds()
    t = _Timing(cost, trace.samples_per_us)
    if level is None:
        level = 4.0 * _quiet_level(trace)
    gap = _internal_silence(trace, seg, level, th.pool_split_min_us * t.spu)
    if gap is None:
        raise BlocksNotFound("no silence separating the two pooling blocks")
    hyp = LayerHypothesis(LayerKind.MAXPOOL, seg)
    block1 = Segment(seg.start, gap.start)
    block2 = Segment(gap.end, seg.end)
    by_time = max(1, int(round(len(block2) / t.pool_y)))
    counted = None
    try:
        pc = count_patterns(trace, block2, expected_range=(1, max(h_in, 2)), prominence_min=th.prominence_min)
        counted = pc.count
    except NoPeriodicity:
        pass
    conf = 1.0
    h_out = counted if counted is not None else by_time
    if counted is not None and counted != by_time:
        conf *= 0.5
        hyp.notes.append(f"pattern count {counted} disagrees with block duration ({by_time} steps)")
    elif counted is None and by_time > 1:
        conf *= 0.7
        hyp.notes.append("second block shows no periodicity; count taken from its duration")
    x_steps = int(round(len(block1) / t.pool_x))
    if x_steps != h_in * h_out:
        conf *= 0.5
        hyp.notes.append(f"first block holds {x_steps} steps, expected {h_in * h_out}")
    z_pool = int(round(h_in / h_out))
    if h_in % h_out:
        conf *= 0.3
        hyp.notes.append(f"h_in={h_in} not divisible by H_out={h_out}")
    if z_pool >= 2:
        try:
            pred = layer_duration(MaxPoolSpec(z_pool), TensorShape(h_in, 1), cost)
            conf *= _duration_factor(pred, len(seg) / t.spu, th, t.spu)
        except ShapeError:
            conf = 0.0
    hyp.params = {"z_pool": z_pool, "h_out": h_out}
    hyp.pattern_counts = {"pool_y_steps": h_out, "pool_y_by_duration": by_time, "pool_x_steps": x_steps}
    hyp.confidence = conf
    return hyp


def extract_dense(trace: Trace, seg: Segment, in_len: int, cost: CostModel | None = None,
                  thresholds: Thresholds | None = None) -> LayerHypothesis:
    """Count neuron groups and trailing remainder neurons: ``N_e = 4 N_g + N_r``."""
    cost = cost or CostModel()
    th = thresholds or Thresholds()
    t = _Timing(cost, trace.samples_per_us)
    cols = in_len // 4
    g_len = t.group + cols * t.dmac
    r_len = t.rneuron + cols * t.dmac
    spikes, levels = detect_spikes(trace, seg, th.k_sigma, min_distance=max(2, int(0.5 * min(g_len, r_len))),
                                   smooth=SPIKE_SMOOTH, align="onset", return_levels=True)
    if len(spikes) == 0:
        raise NoPeriodicity("no neuron spikes in dense segment")
    hyp = LayerHypothesis(LayerKind.DENSE, seg)
    n = len(spikes)
    conf = 1.0
    # remainder neurons carry a weaker spike than neuron groups
    order = np.sort(levels)
    ratios = order[1:] / order[:-1]
    if n > 1 and ratios.max() > 1.2:
        cut = order[int(np.argmax(ratios)) + 1]
        is_group = levels >= cut
    else:
        # one spike class: decide by the mean block length
        total = seg.end - spikes[0]
        is_group = np.full(n, abs(total - n * g_len) <= abs(total - n * r_len))
    n_g = int(np.count_nonzero(is_group))
    n_r = n - n_g
    if is_group[n_g:].any() or n_r > 3:
        raise InconsistentCounts("neuron blocks are not groups followed by at most three remainders")
    if n > 1:
        intervals = np.diff(spikes).astype(np.float64)
        kinds = is_group[:-1]
        expect = np.where(kinds, g_len, r_len)
        worst = float(np.abs(intervals - expect).max())
        tol = _tol(th, g_len) + 2 * SPIKE_SMOOTH
        if worst > tol:
            conf *= float(np.clip(1.0 - (worst - tol) / (2 * tol), 0.0, 1.0))
            hyp.notes.append(f"neuron period deviates by {worst:.0f} samples from the calibrated one")
    n_e = 4 * n_g + n_r
    if in_len < th.dense_min_input:
        conf = min(conf, th.low_input_confidence)
        hyp.notes.append(f"input length {in_len} < {th.dense_min_input}: group patterns too short to trust")
    conf *= _duration_factor(layer_duration(DenseSpec(n_e), TensorShape(1, in_len), cost),
                             len(seg) / t.spu, th, t.spu)
    hyp.params = {"n_e": n_e}
    hyp.pattern_counts = {"neuron_groups": n_g, "remainder_neurons": n_r}
    hyp.confidence = conf
    return hyp


def classify_activation(trace: Trace, seg: Segment, n_elems: int, cost: CostModel | None = None,
                        thresholds: Thresholds | None = None) -> LayerHypothesis:
    """ReLU or not, from the per-element duration."""
    cost = cost or CostModel()
    th = thresholds or Thresholds()
    relu = cost[EventClass.ACT_RELU_ELEM]
    tanh = cost[EventClass.ACT_TANH_ELEM]
    sig = cost[EventClass.ACT_SIGMOID_ELEM]
    cutoff = th.relu_cutoff_us or math.sqrt(relu * tanh)
    per_elem = len(seg) / trace.samples_per_us / n_elems
    is_relu = per_elem < cutoff
    margin = min(1.0, abs(math.log(per_elem / cutoff)) / (0.5 * math.log(tanh / relu)))
    nearest = min(abs(math.log(per_elem / c)) for c in (relu, tanh, sig))
    fit = float(np.clip(1.0 - (nearest - 0.05) / 0.25, 0.0, 1.0))
    hyp = LayerHypothesis(LayerKind.ACTIVATION, seg)
    regular = None
    if n_elems >= 4:
        try:
            pc = count_patterns(trace, seg, expected_range=(max(1, n_elems // 2), 2 * n_elems),
                                prominence_min=th.prominence_min)
            regular = pc.count
        except NoPeriodicity:
            pass
    hyp.params = {"kind": "relu" if is_relu else SIGMOID_OR_TANH}
    hyp.pattern_counts = {"elements": n_elems, "elements_counted": regular,
                          "per_element_us": round(per_elem, 5)}
    hyp.confidence = min(margin, 0.5 + 0.5 * fit)
    return hyp


# -- classification -----------------------------------------------------------

_AFTER = {
    LayerKind.CONV: {LayerKind.ACTIVATION, LayerKind.MAXPOOL, LayerKind.CONV},
    LayerKind.DENSE: {LayerKind.ACTIVATION, LayerKind.DENSE},
}


def _quiet_level(trace):
    env = envelope(trace, min(128, len(trace.samples)), 64)
    return noise_floor(env)[0]


def _plausible_duration(kind, dur_us, shape, cost, th, spu):
    """How well the segment duration fits some layer of ``kind`` on ``shape`` (0..1)."""
    if shape is None:
        return 0.5
    if kind is LayerKind.ACTIVATION:
        per = dur_us / shape.size
        nearest = min(abs(math.log(per / cost[ACTIVATION_CLASS[k]]))
                      for k in (ActivationKind.RELU, ActivationKind.TANH, ActivationKind.SIGMOID))
        return float(np.clip(1.0 - (nearest - 0.05) / 0.25, 0.0, 1.0))
    if kind is LayerKind.MAXPOOL:
        best = 0.0
        for zp in range(2, shape.h + 1):
            if shape.h % zp == 0:
                pred = layer_duration(MaxPoolSpec(zp), shape, cost)
                best = max(best, _duration_factor(pred, dur_us, th, spu))
        return best
    if kind is LayerKind.DENSE:
        g = layer_duration(DenseSpec(4), shape, cost) / 4
        approx = int(dur_us / g)
        best = 0.0
        for n in range(max(1, approx - 3), approx + 4):
            best = max(best, _duration_factor(layer_duration(DenseSpec(n), shape, cost), dur_us, th, spu))
        return best
    return 1.0


def _signature_scores(trace, seg, cost, th, level):
    t = _Timing(cost, trace.samples_per_us)
    scores = {k: 0.05 for k in (LayerKind.CONV, LayerKind.DENSE, LayerKind.MAXPOOL, LayerKind.ACTIVATION)}
    if _internal_silence(trace, seg, level, th.pool_split_min_us * t.spu) is not None:
        scores[LayerKind.MAXPOOL] = 0.95
        return scores
    min_dist = max(2, int(0.5 * (t.pair + min(t.mac, t.rem))))
    spikes = detect_spikes(trace, seg, th.k_sigma, min_distance=min_dist, smooth=SPIKE_SMOOTH)
    if len(spikes):
        lead = spikes[0] - seg.start
        if lead > 0.5 * t.setup:
            scores[LayerKind.CONV] = 0.9
            scores[LayerKind.DENSE] = 0.2
        else:
            scores[LayerKind.DENSE] = 0.9
            scores[LayerKind.CONV] = 0.2
        scores[LayerKind.ACTIVATION] = 0.1
    else:
        scores[LayerKind.ACTIVATION] = 0.9
        scores[LayerKind.DENSE] = 0.1
    return scores


def rank_kinds(trace: Trace, seg: Segment, ctx: dict, cost: CostModel | None = None,
               thresholds: Thresholds | None = None) -> list:
    """Kinds with scores, best first, plus a note when the order prior decided."""
    cost = cost or CostModel()
    th = thresholds or Thresholds()
    level = ctx.get("level")
    if level is None:
        level = 4.0 * _quiet_level(trace)
    shape = ctx.get("in_shape")
    dur = len(seg) / trace.samples_per_us
    sig = _signature_scores(trace, seg, cost, th, level)
    ranked = []
    for kind, s in sig.items():
        plaus = _plausible_duration(kind, dur, shape, cost, th, trace.samples_per_us)
        ranked.append([kind, s * (0.4 + 0.6 * plaus)])
    ranked.sort(key=lambda kv: -kv[1])
    note = None
    prev = ctx.get("prev_kind")
    if prev in _AFTER and len(ranked) > 1 and ranked[0][1] - ranked[1][1] < 0.1:
        if ranked[0][0] not in _AFTER[prev] and ranked[1][0] in _AFTER[prev]:
            ranked[0], ranked[1] = ranked[1], ranked[0]
            note = f"order prior after {prev.value} preferred {ranked[0][0].value}"
    return [(k, float(s)) for k, s in ranked], note


def classify_layer(trace: Trace, seg: Segment, ctx: dict, cost: CostModel | None = None,
                   thresholds: Thresholds | None = None) -> tuple:
    """``(LayerKind, confidence)``; ``(UNKNOWN, 0.0)`` when nothing fits."""
    try:
        ranked, _ = rank_kinds(trace, seg, ctx, cost, thresholds)
    except Exception:  # classification never raises
        return LayerKind.UNKNOWN, 0.0
    kind, score = ranked[0]
    if score < 0.2:
        return LayerKind.UNKNOWN, 0.0
    return kind, score


def _extract_kind(kind, trace, seg, shape, cost, th, level):
    if kind is LayerKind.CONV:
        return extract_conv(trace, seg, shape.c, shape.h, cost, th)
    if kind is LayerKind.DENSE:
        return extract_dense(trace, seg, shape.size, cost, th)
    if kind is LayerKind.MAXPOOL:
        return extract_maxpool(trace, seg, shape.h, cost, th, level)
    return classify_activation(trace, seg, shape.size, cost, th)


def _noise_gate(ratio, th):
    span = th.noise_max_ratio - th.noise_ok_ratio
    return float(np.clip((th.noise_max_ratio - ratio) / span, 0.0, 1.0))


def extract_architecture(trace: Trace, input_shape: TensorShape, cost: CostModel | None = None,
                         thresholds: Thresholds | None = None) -> ExtractionReport:
    """Segment, classify and invert every layer in execution order.

    Never raises on ambiguity: failures are recorded per hypothesis and in
    ``errors``. ``recovered`` is set only when every layer resolved with
    confidence at or above the floor; ``best_guess`` whenever every layer
    produced parameters that propagate.
    """
    cost = cost or CostModel()
    th = thresholds or Thresholds()
    report = ExtractionReport(input_shape, trace.sample_rate)
    try:
        segments, base = _segments_and_noise(trace, th)
    except NoActivityDetected as exc:
        report.errors.append(f"NoActivityDetected: {exc}")
        return report
    except ValueError as exc:
        report.errors.append(f"{type(exc).__name__}: {exc}")
        return report
    ratio = base / th.min_class_amplitude
    gate = _noise_gate(ratio, th)
    report.noise = {"baseline_rms": base, "ratio_to_min_amplitude": ratio, "confidence_gate": gate}
    if gate < 1.0:
        report.errors.append(f"noise floor is {ratio:.2f}x the smallest class amplitude; "
                             f"confidences scaled by {gate:.2f}")
    level = 4.0 * base + 1e-9
    shape = input_shape
    prev = None
    layers = []
    for i, seg in enumerate(segments, start=1):
        hyp = None
        try:
            ranked, note = rank_kinds(trace, seg, {"in_shape": shape, "prev_kind": prev, "level": level}, cost, th)
        except Exception as exc:  # defensive: classification must not abort the report
            ranked, note = [(LayerKind.UNKNOWN, 0.0)], None
            report.errors.append(f"layer {i}: classification failed: {exc}")
        if note:
            report.prior_used.append(f"layer {i}: {note}")
        failures = []
        if shape is not None:
            for kind, score in ranked:
                if kind is LayerKind.UNKNOWN or score < 0.2:
                    break
                try:
                    hyp = _extract_kind(kind, trace, seg, shape, cost, th, level)
                    hyp.confidence *= min(1.0, score / 0.9)
                    break
                except (ExtractionError, NoPeriodicity, ShapeError) as exc:
                    failures.append(f"{kind.value}: {type(exc).__name__}: {exc}")
        if hyp is None:
            kind = ranked[0][0] if ranked[0][1] >= 0.2 else LayerKind.UNKNOWN
            hyp = LayerHypothesis(kind, seg, confidence=0.0)
            hyp.error = "; ".join(failures) if failures else "input shape unknown"
            report.errors.append(f"layer {i}: {hyp.error}")
        else:
            hyp.notes.extend(f"rejected {f}" for f in failures)
        hyp.confidence *= gate
        layer = hyp.to_layer()
        if layer is not None and shape is not None:
            try:
                shape = layer_output_shape(layer, shape)
            except ShapeError as exc:
                hyp.error = f"recovered layer does not fit the propagated shape: {exc}"
                hyp.confidence = 0.0
                layer = None
                shape = None
        else:
            shape = None
        layers.append(layer)
        prev = hyp.kind
        report.hypotheses.append(hyp)
    if layers and all(l is not None for l in layers):
        try:
            report.best_guess = Architecture(input_shape, tuple(layers))
        except ShapeError as exc:
            report.errors.append(f"recovered layers do not propagate: {exc}")
    if report.best_guess is not None and all(h.confidence >= th.confidence_floor for h in report.hypotheses):
        report.recovered = report.best_guess
    return report
