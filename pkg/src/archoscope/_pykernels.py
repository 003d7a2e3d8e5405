"""Pure numpy versions of the hot loops in ``_kernels.pyx``."""

import numpy as np

_CHUNK = 1 << 20


def render_spans(out, starts, lengths, amps, periods, ramp):
    """Add tapered sinusoidal bursts to ``out`` in place."""
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    amps = np.asarray(amps, dtype=np.float64)
    periods = np.asarray(periods, dtype=np.float64)
    # process spans in chunks to bound the temporaries
    i = 0
    m = len(starts)
    while i < m:
        j = i
        total = 0
        while j < m and (total == 0 or total + lengths[j] <= _CHUNK):
            total += lengths[j]
            j += 1
        _render_block(out, starts[i:j], lengths[i:j], amps[i:j], periods[i:j], ramp)
        i = j


def _render_block(out, starts, lengths, amps, periods, ramp):
    owner = np.repeat(np.arange(len(starts)), lengths)
    offsets = np.cumsum(lengths) - lengths
    local = np.arange(len(owner), dtype=np.int64) - offsets[owner]
    n = lengths[owner]
    r = np.minimum(ramp, n // 4)
    pos = np.minimum(local, n - 1 - local).astype(np.float64)
    w = np.ones(len(owner))
    tapered = pos < r
    w[tapered] = 0.5 * (1.0 - np.cos(np.pi * (pos[tapered] + 0.5) / r[tapered]))
    wave = (amps[owner] * w * np.sin(2.0 * np.pi * local / periods[owner])).astype(out.dtype)
    idx = starts[owner] + local
    if _overlapping(starts, lengths):
        np.add.at(out, idx, wave)
    else:
        out[idx] += wave


def _overlapping(starts, lengths):
    if len(starts) < 2:
        return False
    order = np.argsort(starts, kind="stable")
    s = starts[order]
    e = s + lengths[order]
    return bool(np.any(s[1:] < e[:-1]))


def peak_nms(x, threshold, min_distance):
    """Local maxima above ``threshold``, greedily suppressed by height."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 3:
        return np.empty(0, dtype=np.int64)
    mid = x[1:-1]
    cand = np.flatnonzero((mid > threshold) & (mid >= x[:-2]) & (mid > x[2:])) + 1
    if min_distance <= 1 or len(cand) < 2:
        return cand.astype(np.int64)
    order = cand[np.argsort(-x[cand], kind="stable")]
    keep = np.zeros(len(x), dtype=bool)
    blocked = np.zeros(len(x), dtype=bool)
    for idx in order:
        if blocked[idx]:
            continue
        keep[idx] = True
        blocked[max(0, idx - min_distance + 1):idx + min_distance] = True
    return np.flatnonzero(keep).astype(np.int64)
