"""Command line: synth, extract, diff, spectro.

Exit codes: 0 success, 2 bad input (schema, format, IO), 3 synthesis
failure, 4 extraction left layers unresolved.

Every option can also come from a JSON config file (``--config`` or the
``ARCHOSCOPE_CONFIG`` environment variable) using the option names with
underscores, optionally nested per command: ``{"seed": 3, "extract":
{"input_shape": "28x1"}}``. Flags win over the file.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import tracefile
from .emulator import CostModel, CostModelError, emulate_inference, summarize
from .extraction import Thresholds, extract_architecture
from .model import Architecture, SchemaError, ShapeError, TensorShape, diff_architectures
from .render import MIN_CLASS_AMPLITUDE, RenderError, RenderParams, render_trace

EXIT_OK, EXIT_INPUT, EXIT_SYNTH, EXIT_UNRESOLVED = 0, 2, 3, 4
CONFIG_ENV = "ARCHOSCOPE_CONFIG"

DEFAULTS = {
    "synth": {"seed": 1, "noise": 0.2 * MIN_CLASS_AMPLITUDE, "average": 16, "annotate": False,
              "cost_model": None, "sample_rate": 200e6},
    "extract": {"input_shape": None, "report": None, "thresholds": None, "cost_model": None,
                "arch_out": None},
    "diff": {"strict_activation": False},
    "spectro": {"window": 256, "hop": 128},
}


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path} is not valid JSON: {exc}") from exc


def _effective(ctx, command: str, flags: dict) -> dict:
    """Defaults, then config file (top level, then per-command section), then flags."""
    conf = dict(DEFAULTS[command])
    file_conf = ctx.obj.get("config") or {}
    for source in (file_conf, file_conf.get(command, {})):
        if not isinstance(source, dict):
            continue
        for key, value in source.items():
            if key in conf:
                conf[key] = value
    for key, value in flags.items():
        if value is not None:
            conf[key] = value
    return conf


def _cost_model(spec) -> CostModel:
    if spec is None:
        return CostModel()
    data = spec if isinstance(spec, dict) else _load_json(spec, "cost model")
    try:
        return CostModel.from_dict(data)
    except (CostModelError, TypeError, ValueError) as exc:
        raise InputError(f"invalid cost model: {exc}") from exc


def _thresholds(spec) -> Thresholds:
    if spec is None:
        return Thresholds()
    data = spec if isinstance(spec, dict) else _load_json(spec, "thresholds file")
    try:
        return Thresholds.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid thresholds: {exc}") from exc


def parse_shape(text) -> TensorShape:
    try:
        h, c = (int(v) for v in str(text).lower().split("x"))
        return TensorShape(h, c)
    except (ValueError, ShapeError) as exc:
        raise InputError(f"input shape must look like HxC (e.g. 28x1), got {text!r}") from exc


def _read_trace(path):
    try:
        return tracefile.read_trace(path)
    except OSError as exc:
        raise InputError(f"cannot read trace {path}: {exc.strerror or exc}") from exc
    except tracefile.TraceFormatError as exc:
        raise InputError(f"{path}: {exc}") from exc


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help=f"JSON config file (default: ${CONFIG_ENV}).")
@click.pass_context
def main(ctx, config_path):
    """Emulate CMSIS-NN inference traces and recover architectures from them."""
    ctx.ensure_object(dict)
    path = config_path or os.environ.get(CONFIG_ENV)
    ctx.obj["config"] = None
    ctx.obj["config_path"] = path
    if path:
        try:
            conf = _load_json(path, "config file")
        except InputError as exc:
            _fail(EXIT_INPUT, str(exc))
        if not isinstance(conf, dict):
            _fail(EXIT_INPUT, f"config file {path} must hold a JSON object")
        ctx.obj["config"] = conf


@main.command()
@click.argument("arch_json", type=click.Path(dir_okay=False))
@click.argument("out_trace", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, help="Noise RNG seed.")
@click.option("--noise", type=float, help="Noise std per raw acquisition (amplitude units).")
@click.option("--average", type=int, help="Number of acquisitions averaged.")
@click.option("--annotate/--no-annotate", default=None, help="Append the ground-truth event tree.")
@click.option("--cost-model", type=click.Path(dir_okay=False), help="Cost model JSON.")
@click.option("--sample-rate", type=float, help="Samples per second.")
@click.pass_context
def synth(ctx, arch_json, out_trace, seed, noise, average, annotate, cost_model, sample_rate):
    """Render a trace for ARCH_JSON into OUT_TRACE (EMT1)."""
    conf = _effective(ctx, "synth", {"seed": seed, "noise": noise, "average": average,
                                     "annotate": annotate, "cost_model": cost_model,
                                     "sample_rate": sample_rate})
    try:
        arch = Architecture.load(arch_json)
        cost = _cost_model(conf["cost_model"])
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot read {arch_json}: {exc.strerror or exc}")
    except (SchemaError, InputError) as exc:
        _fail(EXIT_INPUT, str(exc))
    try:
        params = RenderParams(sample_rate=float(conf["sample_rate"]), noise_sigma=float(conf["noise"]),
                              n_average=int(conf["average"]), rng_seed=int(conf["seed"]))
        root = emulate_inference(arch, cost)
        trace = render_trace(root, params)
    except (RenderError, ValueError) as exc:
        _fail(EXIT_SYNTH, f"render failed: {exc}")
    try:
        tracefile.write_trace(out_trace, trace, annotate=bool(conf["annotate"]))
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot write {out_trace}: {exc.strerror or exc}")
    click.echo(f"wrote {out_trace}: {len(trace)} samples at {trace.sample_rate:g} S/s, "
               f"inference {root.duration:.2f} us")
    for row in summarize(root):
        extra = ", ".join(f"{k}={v}" for k, v in row.items() if k not in ("layer", "start_us", "duration_us"))
        click.echo(f"  {row['layer']:<28} {row['duration_us']:>12.2f} us  {extra}")


def _format_params(h) -> str:
    return ", ".join(f"{k}={v}" for k, v in h.params.items()) or (h.error or "-")


@main.command()
@click.argument("in_trace", type=click.Path(dir_okay=False))
@click.option("--input-shape", help="Model input shape HxC (attacker knowledge).")
@click.option("--report", type=click.Path(dir_okay=False), help="Write the JSON report here.")
@click.option("--thresholds", type=click.Path(dir_okay=False), help="Detector thresholds JSON.")
@click.option("--cost-model", type=click.Path(dir_okay=False), help="Calibration cost model JSON.")
@click.option("--arch-out", type=click.Path(dir_okay=False),
              help="Write the best-guess architecture JSON here.")
@click.pass_context
def extract(ctx, in_trace, input_shape, report, thresholds, cost_model, arch_out):
    """Recover the architecture from IN_TRACE."""
    conf = _effective(ctx, "extract", {"input_shape": input_shape, "report": report,
                                       "thresholds": thresholds, "cost_model": cost_model,
                                       "arch_out": arch_out})
    try:
        if conf["input_shape"] is None:
            raise InputError("--input-shape is required (flag or config)")
        shape = parse_shape(conf["input_shape"])
        th = _thresholds(conf["thresholds"])
        cost = _cost_model(conf["cost_model"])
        trace = _read_trace(in_trace)
    except InputError as exc:
        _fail(EXIT_INPUT, str(exc))
    result = extract_architecture(trace, shape, cost, th)
    result.config = {"command": "extract", "input": in_trace, **conf,
                     "thresholds": th.to_dict(), "cost_model": cost.to_dict(),
                     "config_file": ctx.obj.get("config_path")}
    try:
        if conf["report"]:
            Path(conf["report"]).write_text(json.dumps(result.to_dict(), indent=2) + "\n")
        if conf["arch_out"] and result.best_guess is not None:
            result.best_guess.save(conf["arch_out"])
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot write output: {exc.strerror or exc}")
    click.echo(f"{'#':>3}  {'kind':<11} {'conf':>5}  params")
    for i, h in enumerate(result.hypotheses, start=1):
        click.echo(f"{i:>3}  {h.kind.value:<11} {h.confidence:5.2f}  {_format_params(h)}")
    for err in result.errors:
        click.echo(f"note: {err}")
    if result.resolved:
        click.echo(f"resolved: {len(result.hypotheses)} layers")
        sys.exit(EXIT_OK)
    low = sum(h.confidence < th.confidence_floor for h in result.hypotheses)
    click.echo(f"unresolved: {low} of {len(result.hypotheses)} layers below confidence {th.confidence_floor}")
    sys.exit(EXIT_UNRESOLVED)


@main.command()
@click.argument("arch_a", type=click.Path(dir_okay=False))
@click.argument("arch_b", type=click.Path(dir_okay=False))
@click.option("--strict-activation/--relu-or-not", default=None,
              help="Compare activation kinds exactly instead of ReLU-or-not.")
@click.pass_context
def diff(ctx, arch_a, arch_b, strict_activation):
    """Field-level differences between two architecture files; exit 0 iff identical."""
    conf = _effective(ctx, "diff", {"strict_activation": strict_activation})
    try:
        a, b = Architecture.load(arch_a), Architecture.load(arch_b)
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot read architecture: {exc.strerror or exc}")
    except SchemaError as exc:
        _fail(EXIT_INPUT, str(exc))
    lines = diff_architectures(a, b, strict_activation=bool(conf["strict_activation"]))
    for line in lines:
        click.echo(line)
    sys.exit(1 if lines else EXIT_OK)


@main.command()
@click.argument("in_trace", type=click.Path(dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--window", type=int, help="STFT window (samples).")
@click.option("--hop", type=int, help="STFT hop (samples).")
@click.pass_context
def spectro(ctx, in_trace, out, window, hop):
    """Export a spectrogram of IN_TRACE as CSV or PNG (chosen by extension)."""
    from .signal import SignalError, spectrogram

    conf = _effective(ctx, "spectro", {"window": window, "hop": hop})
    suffix = Path(out).suffix.lower()
    try:
        if suffix not in (".csv", ".png"):
            raise InputError(f"output must end in .csv or .png, got {out!r}")
        trace = _read_trace(in_trace)
        spec = spectrogram(trace, int(conf["window"]), int(conf["hop"]))
    except InputError as exc:
        _fail(EXIT_INPUT, str(exc))
    except SignalError as exc:
        _fail(EXIT_INPUT, f"{type(exc).__name__}: {exc}")
    try:
        if suffix == ".csv":
            header = ",".join(["time_us"] + [f"{f / 1e6:.4f}MHz" for f in spec.freqs])
            grid = np.column_stack([spec.times * 1e6, spec.magnitudes])
            np.savetxt(out, grid, delimiter=",", header=header, comments="", fmt="%.6g")
        else:
            _save_png(spec, out)
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot write {out}: {exc.strerror or exc}")
    click.echo(f"wrote {out}: {spec.magnitudes.shape[0]} frames x {spec.magnitudes.shape[1]} bins")


def _save_png(spec, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mags = 20 * np.log10(spec.magnitudes.T + 1e-6)
    fig, ax = plt.subplots(figsize=(12, 4), dpi=100)
    extent = [spec.times[0] * 1e6, spec.times[-1] * 1e6, 0, spec.freqs[-1] / 1e6]
    img = ax.imshow(mags, aspect="auto", origin="lower", extent=extent, cmap="viridis",
                    interpolation="nearest")
    ax.set_xlabel("time (us)")
    ax.set_ylabel("frequency (MHz)")
    fig.colorbar(img, ax=ax, label="dB")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


if __name__ == "__main__":
    main()
