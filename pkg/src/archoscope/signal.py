"""Trace analysis primitives: envelopes, spectrograms, segmentation,
periodic pattern counting and spike detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from . import kernels


class SignalError(ValueError):
    pass


class WindowLargerThanTrace(SignalError):
    pass


class NoActivityDetected(SignalError):
    pass


class NoPeriodicity(SignalError):
    pass


@dataclass(frozen=True)
class Segment:
    start: int
    end: int

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"empty segment [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start

    def shift(self, offset: int) -> "Segment":
        return Segment(self.start + offset, self.end + offset)


@dataclass(frozen=True)
class Envelope:
    window: int
    hop: int
    values: np.ndarray
    sample_rate: float

    def frame_start(self, i):
        return i * self.hop


@dataclass(frozen=True)
class Spectrogram:
    window: int
    hop: int
    magnitudes: np.ndarray  # (frames, window // 2 + 1)
    sample_rate: float

    @property
    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.window, 1.0 / self.sample_rate)

    @property
    def times(self) -> np.ndarray:
        """Frame centre times in seconds."""
        return (np.arange(len(self.magnitudes)) * self.hop + self.window / 2) / self.sample_rate


@dataclass(frozen=True)
class PatternCount:
    count: int
    period: float  # samples
    confidence: float


def _samples(trace, seg=None):
    x = trace.samples if seg is None else trace.samples[seg.start:seg.end]
    return np.asarray(x, dtype=np.float64)


def moving_rms(x: np.ndarray, window: int) -> np.ndarray:
    """Centred moving RMS, same length as ``x``."""
    x = np.asarray(x, dtype=np.float64)
    window = max(1, int(window))
    c = np.concatenate(([0.0], np.cumsum(x * x)))
    n = len(x)
    lo = np.clip(np.arange(n) - window // 2, 0, n)
    hi = np.clip(lo + window, 0, n)
    lo = np.clip(hi - window, 0, n)
    return np.sqrt(np.maximum(c[hi] - c[lo], 0.0) / np.maximum(hi - lo, 1))


def envelope(trace, window: int, hop: int) -> Envelope:
    """RMS of ``samples[i*hop : i*hop + window]`` for every full frame."""
    if window < 2 or hop < 1:
        raise SignalError("envelope needs window >= 2 and hop >= 1")
    n = len(trace.samples)
    if window > n:
        raise WindowLargerThanTrace(f"window {window} > trace length {n}")
    x = np.asarray(trace.samples, dtype=np.float64)
    c = np.concatenate(([0.0], np.cumsum(x * x)))
    starts = np.arange(0, n - window + 1, hop)
    values = np.sqrt(np.maximum(c[starts + window] - c[starts], 0.0) / window)
    return Envelope(window, hop, values, trace.sample_rate)


def spectrogram(trace, window: int, hop: int, max_frames_per_chunk: int = 4096) -> Spectrogram:
    """Hann-weighted STFT magnitudes, one row per frame."""
    if window < 2 or hop < 1:
        raise SignalError("spectrogram needs window >= 2 and hop >= 1")
    x = np.asarray(trace.samples, dtype=np.float32)
    n = len(x)
    if window > n:
        raise WindowLargerThanTrace(f"window {window} > trace length {n}")
    frames = 1 + (n - window) // hop
    win = np.hanning(window).astype(np.float32)
    view = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:frames]
    out = np.empty((frames, window // 2 + 1), dtype=np.float32)
    for i in range(0, frames, max_frames_per_chunk):
        out[i:i + max_frames_per_chunk] = np.abs(sfft.rfft(view[i:i + max_frames_per_chunk] * win, axis=1))
    return Spectrogram(window, hop, out, trace.sample_rate)


def _runs(mask: np.ndarray):
    """Start/end (exclusive) indices of the True runs of ``mask``."""
    m = np.concatenate(([False], np.asarray(mask, dtype=bool), [False]))
    d = np.diff(m.astype(np.int8))
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def noise_floor(env: Envelope) -> tuple:
    """Baseline level and frame-level spread of the silent frames.

    The quietest decile anchors the silent population; every frame within
    1.5x of its upper edge joins it, which removes the downward bias of
    averaging only the lowest tenth.
    """
    vals = env.values
    q = np.quantile(vals, 0.1)
    quiet = vals[vals <= 1.5 * q] if q > 0 else vals[vals <= q]
    base = float(quiet.mean())
    # a small population underestimates the spread; fall back on the spread
    # expected for the RMS of `window` independent noise samples
    spread = max(float(quiet.std()), base / np.sqrt(2.0 * env.window))
    return base, spread


def segment_boundaries(env: Envelope, spec: Spectrogram | None, min_gap: float, k_sigma: float = 3.0,
                       min_significance: float = 8.0, samples=None) -> list:
    """Maximal active runs, merged across silences shorter than ``min_gap`` (µs).

    A frame is active when its envelope exceeds ``baseline + k_sigma *
    baseline_std`` or, when a spectrogram is given, its dominant bin rises
    above the silence spectrum by the same margin. Runs whose excess energy
    is not ``min_significance`` standard deviations above the noise floor are
    discarded before merging (requires ``samples``).
    """
    vals = env.values
    base, spread = noise_floor(env)
    active = vals > base + k_sigma * spread
    if spec is not None and len(spec.magnitudes):
        peak = spec.magnitudes.max(axis=1)
        centres = np.arange(len(vals)) * env.hop + env.window / 2
        j = np.clip(np.rint((centres - spec.window / 2) / spec.hop).astype(np.int64), 0, len(peak) - 1)
        quiet = vals <= np.quantile(vals, 0.1)
        ref = peak[j[quiet]]
        active |= peak[j] > ref.mean() + k_sigma * max(ref.std(), 1e-12)
    starts, ends = _runs(active)
    if len(starts) == 0:
        raise NoActivityDetected("no frame above the noise floor")
    s_samples = starts * env.hop
    e_samples = (ends - 1) * env.hop + env.window
    if samples is not None:
        x = np.asarray(samples, dtype=np.float64)
        c = np.concatenate(([0.0], np.cumsum(x * x)))
        power = base * base
        keep = []
        for s, e in zip(s_samples, e_samples):
            n = e - s
            excess = (c[e] - c[s]) - n * power
            keep.append(excess > min_significance * max(power, 1e-30) * np.sqrt(2.0 * n))
        keep = np.asarray(keep, dtype=bool)
        s_samples, e_samples = s_samples[keep], e_samples[keep]
        if len(s_samples) == 0:
            raise NoActivityDetected("no significant activity above the noise floor")
    gap = min_gap * env.sample_rate * 1e-6
    segments = []
    cur_s, cur_e = int(s_samples[0]), int(e_samples[0])
    for s, e in zip(s_samples[1:], e_samples[1:]):
        if s - cur_e < gap:
            cur_e = max(cur_e, int(e))
        else:
            segments.append(Segment(cur_s, cur_e))
            cur_s, cur_e = int(s), int(e)
    segments.append(Segment(cur_s, cur_e))
    return segments


def _carrier_window(x: np.ndarray) -> int:
    """About one carrier period, from the zero-crossing rate."""
    y = x - x.mean()
    crossings = np.count_nonzero(np.signbit(y[1:]) != np.signbit(y[:-1]))
    half = len(y) / max(crossings, 1)
    return int(max(2, round(2 * half)))


def autocorrelation(f: np.ndarray, unbiased: bool = True) -> np.ndarray:
    """Normalised autocorrelation of a mean-removed feature."""
    f = f - f.mean()
    n = len(f)
    size = sfft.next_fast_len(2 * n)
    spec = sfft.rfft(f, size)
    acf = sfft.irfft(spec * np.conj(spec), size)[:n]
    if unbiased:
        acf /= np.arange(n, 0, -1)
    if acf[0] <= 0:
        return np.zeros(n)
    return acf / acf[0]


def _parabolic(r, k):
    if 0 < k < len(r) - 1:
        a, b, c = r[k - 1], r[k], r[k + 1]
        den = a - 2 * b + c
        if den < 0:
            return k + 0.5 * (a - c) / den
    return float(k)


def _refine_period(r, lag, limit):
    period = _parabolic(r, lag)
    m = 2
    while m * period <= limit:
        guess = m * period
        # never wide enough to reach a neighbouring multiple
        half = max(2, int(np.ceil(min(0.02 * guess, 0.25 * period))))
        lo = max(1, int(guess) - half)
        hi = min(len(r) - 1, int(guess) + half + 1)
        if hi - lo < 3:
            break
        k = lo + int(np.argmax(r[lo:hi]))
        if k in (lo, hi - 1):
            break
        period = _parabolic(r, k) / m
        m *= 2
    return period


def estimate_period(f: np.ndarray, lo: int, hi: int):
    """Fundamental lag of ``f`` within ``[lo, hi]`` and its prominence.

    The lag is the highest local maximum of the biased autocorrelation,
    whose linear taper penalises multiples of the true period. Prominence is
    the unbiased peak height above the deepest earlier valley.
    """
    r = autocorrelation(f, unbiased=False)
    n = len(f)
    hi = min(hi, n - 2)
    if hi < lo or lo < 1:
        raise NoPeriodicity("lag range is empty")
    # skip the zero-lag lobe: search from its first zero crossing or valley
    neg = np.flatnonzero(r[1:hi + 2] < 0)
    d = np.diff(r[:hi + 2])
    rising = np.flatnonzero(d > 0)
    lobe = int(neg[0]) + 1 if len(neg) else (int(rising[0]) if len(rising) else hi)
    lo = max(lo, lobe)
    if hi < lo:
        raise NoPeriodicity("no autocorrelation peak in range")
    seg = r[lo - 1:hi + 2]
    idx = np.flatnonzero((seg[1:-1] >= seg[:-2]) & (seg[1:-1] > seg[2:])) + lo
    if len(idx) == 0:
        raise NoPeriodicity("no autocorrelation peak in range")
    lag = int(idx[np.argmax(r[idx])])
    if r[lag] <= 0:
        raise NoPeriodicity("no positive autocorrelation peak")
    ru = r * n / np.arange(n, 0, -1)
    valley = ru[1:lag + 1].min()
    prominence = float(np.clip(ru[lag] - max(valley, 0.0), 0.0, 1.0))
    period = _refine_period(r, lag, n // 2)
    return period, prominence


def count_patterns(trace, seg: Segment, expected_range=None, prominence_min: float = 0.2,
                   smooth: int | None = None) -> PatternCount:
    """Count repetitions of the dominant pattern inside ``seg``.

    The period comes from the autocorrelation of a smoothed energy feature
    (restricted to ``expected_range`` counts when given). The segment is
    then cut into period-long cells from its start and the cells holding at
    least half the median cell energy are counted, so a trailing event of a
    weaker class does not count as a pattern.
    """
    x = _samples(trace, seg)
    n = len(x)
    if n < 8:
        raise NoPeriodicity("segment too short")
    w = smooth or _carrier_window(x)
    f = moving_rms(x, w) ** 2
    if expected_range is not None:
        cmin, cmax = expected_range
        lo = max(2, int(np.floor(n / max(cmax, 1))) - 1)
        hi = int(np.ceil(n / max(cmin, 1))) + 1 if cmin else n // 2
    else:
        lo, hi = 2, n // 2
    hi = min(hi, n // 2 + 1)
    try:
        period, prominence = estimate_period(f, lo, hi)
    except NoPeriodicity:
        period, prominence = None, 0.0
    if prominence < prominence_min and expected_range is None:
        # flat energy (e.g. a pure tone): the oscillation itself is the pattern
        try:
            period, prominence = estimate_period(x, lo, hi)
        except NoPeriodicity:
            pass
    if period is None or prominence < prominence_min:
        raise NoPeriodicity(f"autocorrelation prominence {prominence:.3f} < {prominence_min}")
    edges = np.rint(np.arange(0, n / period + 1) * period).astype(np.int64)
    edges = np.unique(np.clip(edges, 0, n))
    if edges[-1] < n:
        edges = np.append(edges, n)
    c = np.concatenate(([0.0], np.cumsum(x * x)))
    energy = c[edges[1:]] - c[edges[:-1]]
    full = energy[:max(1, int(n // period))]
    ref = np.median(full)
    count = int(np.count_nonzero(energy >= 0.5 * ref))
    return PatternCount(max(count, 1), float(period), prominence)


def spike_feature(x: np.ndarray, smooth: int = 8) -> np.ndarray:
    return moving_rms(x, smooth)


def detect_spikes(trace, seg: Segment, k_sigma: float = 3.0, min_distance: int | None = None,
                  smooth: int = 8, min_ratio: float = 2.0, align: str = "peak",
                  return_levels: bool = False):
    """Sample indices of short high-energy events inside ``seg``.

    Local maxima of the smoothed envelope above ``median + k_sigma * 1.4826
    * MAD`` (and at least ``min_ratio`` times the median level), suppressed
    within ``min_distance`` samples. The default distance is half the
    dominant period of the envelope. ``align="peak"`` snaps each index to the
    largest raw excursion near the maximum; ``align="onset"`` moves it back
    to the rising edge, where the envelope first reaches half the peak.
    """
    x = _samples(trace, seg)
    empty = np.empty(0, dtype=np.int64)
    if len(x) < 3:
        return (empty, np.empty(0)) if return_levels else empty
    f = spike_feature(x, smooth)
    med = float(np.median(f))
    mad = float(np.median(np.abs(f - med)))
    threshold = max(med + k_sigma * 1.4826 * mad, min_ratio * med)
    if not np.any(f > threshold):
        return (empty, np.empty(0)) if return_levels else empty
    if min_distance is None:
        try:
            period, _ = estimate_period(f, 2, len(f) // 2)
            min_distance = max(1, int(period // 2))
        except NoPeriodicity:
            min_distance = smooth
    peaks = kernels.peak_nms(f, threshold, int(min_distance))
    levels = f[peaks]
    out = np.empty(len(peaks), dtype=np.int64)
    half = max(1, smooth // 2)
    ax = np.abs(x)
    for i, p in enumerate(peaks):
        if align == "onset":
            lo = max(0, p - int(min_distance))
            below = np.flatnonzero(f[lo:p] < 0.5 * f[p])
            out[i] = lo + int(below[-1]) + 1 if len(below) else lo
        else:
            lo, hi = max(0, p - half), min(len(x), p + half + 1)
            out[i] = lo + int(np.argmax(ax[lo:hi]))
    out += seg.start
    return (out, levels) if return_levels else out


def refine_edges(trace, seg: Segment, level: float, search: int, smooth: int = 4) -> Segment:
    """Tighten ``seg`` to the first/last sample whose local RMS exceeds ``level``."""
    lo = max(0, seg.start - search)
    hi = min(len(trace.samples), seg.end + search)
    f = moving_rms(np.asarray(trace.samples[lo:hi], dtype=np.float64), smooth)
    above = np.flatnonzero(f > level)
    if len(above) == 0:
        return seg
    return Segment(lo + int(above[0]), lo + int(above[-1]) + 1)
