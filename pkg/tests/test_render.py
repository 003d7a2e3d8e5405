import numpy as np
import pytest

from archoscope import fixtures
from archoscope.emulator import CLASS_CODES, EventClass, EventNode, emulate_inference
from archoscope.render import (
    DEFAULT_AMPLITUDE_DB,
    MIN_CLASS_AMPLITUDE,
    RenderError,
    RenderParams,
    SampleRateTooLow,
    flatten_spans,
    render_trace,
)

E = EventClass


def one_leaf(duration_us=1.0):
    leaf = EventNode("x", E.SIMD_MAC_GROUP, 0.0, duration_us)
    return EventNode("root", E.COMPOSITE, 0.0, duration_us, [leaf])


def test_single_leaf_noiseless_is_pure_burst():
    tr = render_trace(one_leaf(), RenderParams(noise_sigma=0.0))
    a, b = tr.span(tr.annotation.children[0])
    assert np.all(tr.samples[:a] == 0) and np.all(tr.samples[b:] == 0)
    burst = tr.samples[a:b]
    # 0 dB class, carrier of 10 samples: integer samples peak at sin(0.4 pi)
    assert np.abs(burst).max() == pytest.approx(np.sin(0.4 * np.pi), abs=1e-6)
    # 200 samples of a 10-sample carrier: 20 periods, two sign changes each
    assert b - a == 200
    assert np.count_nonzero(np.diff(np.signbit(burst[1:-1]))) in (39, 40)


def test_residual_noise_std():
    sigma = 0.5
    root = one_leaf(100.0)
    tr = render_trace(root, RenderParams(noise_sigma=sigma, n_average=16, rng_seed=3, idle_min_us=500.0))
    a, _ = tr.span(root.children[0])
    silent = tr.samples[:a - 10]
    assert abs(silent.std() - sigma / 4) <= 0.1 * sigma / 4


def test_render_deterministic():
    root = emulate_inference(fixtures.sp_mlp())
    a = render_trace(root, RenderParams(rng_seed=7))
    b = render_trace(root, RenderParams(rng_seed=7))
    c = render_trace(root, RenderParams(rng_seed=8))
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_sample_rate_too_low():
    with pytest.raises(SampleRateTooLow):
        render_trace(one_leaf(0.05), RenderParams(sample_rate=100e6))


def test_params_validation():
    with pytest.raises(RenderError):
        RenderParams(n_average=0)
    with pytest.raises(RenderError):
        RenderParams(noise_sigma=-1.0)
    with pytest.raises(RenderError):
        RenderParams.from_dict({"gain": 2})
    assert RenderParams.from_dict(RenderParams().to_dict()) == RenderParams()


def test_amplitudes_two_db_apart():
    levels = sorted(DEFAULT_AMPLITUDE_DB.values())
    assert min(np.diff(levels)) >= 2.0
    assert MIN_CLASS_AMPLITUDE == pytest.approx(10 ** (-10 / 20))


def test_layer_gaps_render_silent():
    root = emulate_inference(fixtures.mnist_mlp())
    tr = render_trace(root, RenderParams(noise_sigma=0.0))
    for gap in root.children_of(E.LAYER_GAP):
        a, b = tr.span(gap)
        assert np.all(tr.samples[a + 1:b - 1] == 0)


def test_class_energy_recovers_leaf_counts():
    """Per-class energy over rendered spans, in units of one noiseless burst, gives the leaf count."""
    root = emulate_inference(fixtures.mnist_cnn())
    params = RenderParams()
    tr = render_trace(root, params)
    starts, durs, codes = flatten_spans(root)
    spu = tr.samples_per_us
    first = np.rint((starts + tr.offset_us) * spu).astype(np.int64)
    last = np.rint((starts + durs + tr.offset_us) * spu).astype(np.int64)
    c = np.concatenate(([0.0], np.cumsum(np.asarray(tr.samples, dtype=np.float64) ** 2)))
    for cls in (E.SIMD_MAC_GROUP, E.POOL_X_STEP, E.DENSE_MAC_GROUP, E.ACT_RELU_ELEM):
        sel = codes == CLASS_CODES[cls]
        energy = float(np.sum(c[last[sel]] - c[first[sel]]))
        leaf = EventNode("ref", cls, 0.0, float(durs[sel][0]))
        ref = render_trace(EventNode("root", E.COMPOSITE, 0.0, leaf.duration, [leaf]), params.replace(noise_sigma=0.0))
        per_leaf = float(np.sum(np.asarray(ref.samples, dtype=np.float64) ** 2))
        count = root.count(cls)
        assert energy / per_leaf == pytest.approx(count, rel=0.05)
