"""EMT1 trace container.

Little-endian layout::

    b"EMT1" | u32 version=1 | f64 sample_rate_hz | u64 n | f32[n]
    [ b"ANNO" | u64 byte_length | UTF-8 JSON event tree ]

Annotation times are written relative to the first sample.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .emulator import EventNode
from .render import Trace

MAGIC = b"EMT1"
ANNO = b"ANNO"
VERSION = 1
_HEADER = struct.Struct("<4sIdQ")
_CHUNK = struct.Struct("<4sQ")


class TraceFormatError(ValueError):
    pass


def _shift(node: EventNode, dt: float) -> EventNode:
    for n in node.iter():
        n.start += dt
    return node


def dumps(trace: Trace, annotate: bool = True) -> bytes:
    samples = np.ascontiguousarray(trace.samples, dtype="<f4")
    out = [_HEADER.pack(MAGIC, VERSION, float(trace.sample_rate), len(samples)), samples.tobytes()]
    if annotate and trace.annotation is not None:
        tree = EventNode.from_dict(trace.annotation.to_dict())
        payload = _shift(tree, trace.offset_us).dumps().encode("utf-8")
        out += [_CHUNK.pack(ANNO, len(payload)), payload]
    return b"".join(out)


def loads(data: bytes) -> Trace:
    if len(data) < _HEADER.size:
        raise TraceFormatError("file shorter than the EMT1 header")
    magic, version, rate, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TraceFormatError(f"unsupported EMT1 version {version}")
    if not rate > 0:
        raise TraceFormatError(f"invalid sample rate {rate}")
    end = _HEADER.size + 4 * n
    if len(data) < end:
        raise TraceFormatError(f"truncated: header declares {n} samples, file holds {(len(data) - _HEADER.size) // 4}")
    samples = np.frombuffer(data, dtype="<f4", count=n, offset=_HEADER.size).astype(np.float32)
    annotation = None
    rest = data[end:]
    if rest:
        if len(rest) < _CHUNK.size:
            raise TraceFormatError("truncated trailing chunk header")
        tag, size = _CHUNK.unpack_from(rest, 0)
        if tag != ANNO:
            raise TraceFormatError(f"unknown trailing chunk {tag!r}")
        payload = rest[_CHUNK.size:_CHUNK.size + size]
        if len(payload) != size:
            raise TraceFormatError("truncated annotation chunk")
        try:
            annotation = EventNode.from_dict(json.loads(payload.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise TraceFormatError(f"annotation is not a valid event tree: {exc}") from exc
    try:
        return Trace(rate, samples, annotation, 0.0)
    except ValueError as exc:
        raise TraceFormatError(str(exc)) from exc


def write_trace(path, trace: Trace, annotate: bool = True) -> None:
    Path(path).write_bytes(dumps(trace, annotate))


def read_trace(path) -> Trace:
    return loads(Path(path).read_bytes())
