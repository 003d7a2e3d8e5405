"""Compare the compiled and numpy kernels on a Cifar-sized workload.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from archoscope import _pykernels
from archoscope.emulator import CLASS_CODES, emulate_inference
from archoscope.fixtures import cifar_cnn
from archoscope.render import DEFAULT_AMPLITUDES, DEFAULT_CARRIER, RenderParams, flatten_spans
from archoscope.signal import spike_feature

try:
    from archoscope import _kernels
except ImportError:
    _kernels = None


def _workload():
    params = RenderParams()
    root = emulate_inference(cifar_cnn())
    starts_us, durs_us, codes = flatten_spans(root)
    spu = params.sample_rate * 1e-6
    first = np.rint(starts_us * spu).astype(np.int64)
    lengths = np.rint((starts_us + durs_us) * spu).astype(np.int64) - first
    amp = np.zeros(len(CLASS_CODES))
    per = np.full(len(CLASS_CODES), 4.0)
    for cls, code in CLASS_CODES.items():
        if cls in DEFAULT_AMPLITUDES:
            amp[code] = DEFAULT_AMPLITUDES[cls]
            per[code] = DEFAULT_CARRIER[cls]
    n = int(first[-1] + lengths[-1])
    return n, first, lengths, amp[codes], per[codes]


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    n, first, lengths, amps, pers = _workload()
    backends = {"numpy": _pykernels}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"workload: {len(first)} spans, {n} samples")
    outputs = {}
    feature = None
    for name, mod in backends.items():
        def render():
            out = np.zeros(n, dtype=np.float32)
            mod.render_spans(out, first, lengths, amps, pers, 4)
            outputs[name] = out

        t_render = _best(render, args.repeat)
        if feature is None:
            feature = spike_feature(outputs[name][: 4_000_000], 8)
        thr = 2.0 * float(np.median(feature))
        t_nms = _best(lambda: mod.peak_nms(feature, thr, 30), args.repeat)
        print(f"{name:>7}: render_spans {t_render:7.3f} s   peak_nms {t_nms:7.3f} s")
    if len(outputs) == 2:
        err = float(np.max(np.abs(outputs["numpy"] - outputs["cython"])))
        print(f"max |numpy - cython| = {err:.2e}")


if __name__ == "__main__":
    main()
