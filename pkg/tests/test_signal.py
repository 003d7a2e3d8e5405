import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from archoscope import fixtures
from archoscope.emulator import EventClass, emulate_inference
from archoscope.model import Architecture, ConvSpec, TensorShape
from archoscope.render import RenderParams, Trace, render_trace
from archoscope.signal import (
    Envelope,
    NoActivityDetected,
    NoPeriodicity,
    Segment,
    WindowLargerThanTrace,
    count_patterns,
    detect_spikes,
    envelope,
    segment_boundaries,
    spectrogram,
)

from conftest import rendered

E = EventClass


def trace_of(x, rate=200e6):
    return Trace(rate, np.asarray(x, dtype=np.float32))


def default_segments(tr):
    return segment_boundaries(envelope(tr, 128, 64), spectrogram(tr, 64, 64), 20.0, 3.0, 8.0, tr.samples)


# -- envelope -----------------------------------------------------------------

def test_envelope_constant():
    env = envelope(trace_of(np.full(1000, -2.5)), 64, 16)
    np.testing.assert_allclose(env.values, 2.5, rtol=1e-6)


def test_envelope_zero():
    assert not envelope(trace_of(np.zeros(500)), 32, 8).values.any()


def test_envelope_burst_span():
    x = np.zeros(4000)
    x[1500:2300] = 1.0
    env = envelope(trace_of(x), 64, 16)
    on = np.flatnonzero(env.values > 0)
    first, last = on[0] * 16, on[-1] * 16 + 64
    assert abs(first - 1500) <= 64 and abs(last - 2300) <= 64
    assert np.all(np.diff(on) == 1)  # a single bump


def test_envelope_window_too_large():
    with pytest.raises(WindowLargerThanTrace):
        envelope(trace_of(np.zeros(10)), 32, 8)


# -- spectrogram --------------------------------------------------------------

def test_spectrogram_sinusoid_peak_bin():
    rate, period = 200e6, 8.0
    x = np.sin(2 * np.pi * np.arange(8192) / period)
    spec = spectrogram(trace_of(x, rate), 256, 128)
    peak = spec.freqs[np.argmax(spec.magnitudes.mean(axis=0))]
    nearest = spec.freqs[np.argmin(np.abs(spec.freqs - rate / period))]
    assert peak == nearest


def test_spectrogram_switch_at_junction():
    n = 8192
    x = np.concatenate([np.sin(2 * np.pi * np.arange(n) / 16), np.sin(2 * np.pi * np.arange(n) / 4)])
    spec = spectrogram(trace_of(x), 256, 128)
    dominant = np.argmax(spec.magnitudes, axis=1)
    change = np.flatnonzero(np.diff(dominant))
    assert len(change) == 1
    assert abs((change[0] + 1) * 128 + 128 - n) <= 256


def test_spectrogram_white_noise_flat():
    x = np.random.default_rng(0).standard_normal(1 << 18)
    spec = spectrogram(trace_of(x), 128, 64)
    per_bin = spec.magnitudes.mean(axis=0)[1:-1]  # DC and Nyquist are real-valued bins
    assert np.abs(per_bin / per_bin.mean() - 1).max() < 0.05


def test_spectrogram_window_too_large():
    with pytest.raises(WindowLargerThanTrace):
        spectrogram(trace_of(np.zeros(100)), 256, 128)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.integers(64, 600), elements=st.floats(-5, 5, width=32)))
def test_sign_flip_invariance(x):
    a, b = trace_of(x), trace_of(-x)
    np.testing.assert_allclose(envelope(a, 32, 8).values, envelope(b, 32, 8).values)
    np.testing.assert_allclose(spectrogram(a, 32, 8).magnitudes, spectrogram(b, 32, 8).magnitudes)


# -- segmentation -------------------------------------------------------------

def test_mlp_six_segments():
    _, _, tr = rendered("mnist_mlp")
    assert len(default_segments(tr)) == 6


def test_silence_raises():
    tr = trace_of(np.zeros(20000))
    with pytest.raises(NoActivityDetected):
        default_segments(tr)


def _frames(pattern):
    """Envelope with 10-sample frames at 1 MS/s: each frame is 10 µs."""
    rng = np.random.default_rng(1)
    vals = np.where(np.asarray(pattern) > 0, 10.0, 1.0) + 0.01 * rng.standard_normal(len(pattern))
    return Envelope(10, 10, vals, 1e6)


def test_gap_of_exactly_min_gap_splits():
    quiet = [0] * 20
    env = _frames(quiet + [1] * 5 + [0, 0] + [1] * 5 + quiet)  # 2 frames = 20 µs
    assert len(segment_boundaries(env, None, min_gap=20.0)) == 2


def test_gap_below_min_gap_merges():
    quiet = [0] * 20
    env = _frames(quiet + [1] * 5 + [0] + [1] * 5 + quiet)
    segs = segment_boundaries(env, None, min_gap=20.0)
    assert segs == [Segment(200, 310)]


def test_segmentation_idempotent_on_silenced_complement():
    _, _, tr = rendered("mnist_cnn")
    segs = default_segments(tr)
    sigma = RenderParams().residual_sigma
    y = np.random.default_rng(5).standard_normal(len(tr)).astype(np.float32) * np.float32(sigma)
    for s in segs:
        y[s.start:s.end] = tr.samples[s.start:s.end]
    again = default_segments(trace_of(y))
    assert len(again) == len(segs)
    for a, b in zip(again, segs):
        assert abs(a.start - b.start) <= 64 and abs(a.end - b.end) <= 64


# -- pattern counting ---------------------------------------------------------

def test_count_mnist_first_conv():
    _, root, tr = rendered("mnist_cnn")
    pc = count_patterns(tr, Segment(*tr.span(root.layers()[0])))
    assert pc.count == 392


def test_count_pairs_in_one_call():
    _, root, tr = rendered("mnist_cnn")
    call = root.layers()[3].children_of(E.GEMM_CALL)[10]
    assert count_patterns(tr, Segment(*tr.span(call))).count == 16


@pytest.mark.parametrize("n", [5, 37, 200])
def test_count_pure_tone(n):
    x = np.sin(2 * np.pi * np.arange(n * 20) / 20)
    pc = count_patterns(trace_of(x), Segment(0, len(x)))
    assert pc.count == n and pc.period == pytest.approx(20, abs=0.05)


@settings(max_examples=25, deadline=None)
@given(h=st.sampled_from([4, 6, 8, 10]), c=st.integers(1, 4), k=st.integers(2, 24),
       z=st.sampled_from([1, 3]), seed=st.integers(0, 2**16))
def test_count_matches_annotation_under_default_noise(h, c, k, z, seed):
    arch = Architecture(TensorShape(h, c), (ConvSpec(k, z, 1, z // 2),))
    root = emulate_inference(arch)
    tr = render_trace(root, RenderParams(rng_seed=seed))
    layer = root.layers()[0]
    # target the call level: an output never has more pixels than the input
    most_calls = (h * h + 1) // 2
    pc = count_patterns(tr, Segment(*tr.span(layer)), expected_range=(1, most_calls))
    assert pc.count == len(layer.children_of(E.GEMM_CALL))


def test_count_white_noise_has_no_periodicity():
    x = np.random.default_rng(2).standard_normal(20000)
    with pytest.raises(NoPeriodicity):
        count_patterns(trace_of(x), Segment(0, len(x)))


def test_period_error_noiseless():
    root = emulate_inference(fixtures.mnist_cnn())
    tr = render_trace(root, RenderParams(noise_sigma=0.0))
    conv1, conv2 = root.layers()[0], root.layers()[3]
    calls = conv1.children_of(E.GEMM_CALL)
    true_call = (calls[1].start - calls[0].start) * tr.samples_per_us
    assert abs(count_patterns(tr, Segment(*tr.span(conv1))).period - true_call) <= 1.0
    call = conv2.children_of(E.GEMM_CALL)[3]
    pairs = call.children_of(E.GEMM_KERNEL_PAIR)
    true_pair = (pairs[1].start - pairs[0].start) * tr.samples_per_us
    assert abs(count_patterns(tr, Segment(*tr.span(call))).period - true_pair) <= 1.0


# -- spikes -------------------------------------------------------------------

def test_spikes_mark_kernel_pairs():
    _, root, tr = rendered("mnist_cnn")
    for call in root.layers()[3].children_of(E.GEMM_CALL)[:6]:
        spikes = detect_spikes(tr, Segment(*tr.span(call)))
        starts = np.array([tr.index(p.start) for p in call.children_of(E.GEMM_KERNEL_PAIR)])
        assert len(spikes) == 32 // 2
        assert np.abs(spikes - starts).max() <= 20  # inside the pair's 20-sample setup burst


def test_spikes_flat_signal():
    assert len(detect_spikes(trace_of(np.ones(1000)), Segment(0, 1000))) == 0


def test_spikes_single_impulse():
    x = np.zeros(1000)
    x[437] = 5.0
    assert list(detect_spikes(trace_of(x), Segment(0, 1000))) == [437]
