import json

import numpy as np
import pytest
from click.testing import CliRunner

from archoscope import fixtures, tracefile
from archoscope.cli import main
from archoscope.extraction import split_layers
from archoscope.model import Architecture, ConvSpec, TensorShape


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def files(tmp_path):
    out = {}
    for name, make in fixtures.REFERENCE_MODELS.items():
        path = tmp_path / f"{name}.json"
        make().save(path)
        out[name] = path
    return out


def run(runner, *args, env=None):
    return runner.invoke(main, [str(a) for a in args], env=env, catch_exceptions=False)


# -- synth --------------------------------------------------------------------

def test_synth_summary_lists_gemm_calls(runner, files, tmp_path):
    res = run(runner, "synth", files["mnist_cnn"], tmp_path / "t.emt")
    assert res.exit_code == 0
    first = [l for l in res.output.splitlines() if "L1:" in l][0]
    assert "gemm_calls=392" in first and "kernel_pairs_per_call=8" in first


def test_synth_deterministic_bytes(runner, files, tmp_path):
    a, b = tmp_path / "a.emt", tmp_path / "b.emt"
    for path in (a, b):
        assert run(runner, "synth", files["sp_mlp"], path, "--noise", 0, "--average", 1, "--seed", 4).exit_code == 0
    assert a.read_bytes() == b.read_bytes()


def test_synth_average_reduces_noise(runner, files, tmp_path):
    path = tmp_path / "n.emt"
    assert run(runner, "synth", files["sp_mlp"], path, "--noise", 0.5, "--average", 16).exit_code == 0
    tr = tracefile.read_trace(path)
    idle = tr.samples[: int(45 * tr.samples_per_us)]  # pre-trigger capture
    assert abs(idle.std() - 0.5 / 4) <= 0.1 * 0.5 / 4


def test_synth_annotate(runner, files, tmp_path):
    path = tmp_path / "a.emt"
    assert run(runner, "synth", files["mnist_mlp"], path, "--annotate").exit_code == 0
    assert len(tracefile.read_trace(path).annotation.layers()) == 6


def test_synth_schema_error(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"input": {"h": 4, "c": 1}, "layers": [{"type": "dense"}]}))
    assert run(runner, "synth", bad, tmp_path / "x.emt").exit_code == 2


def test_synth_render_error(runner, files, tmp_path):
    res = run(runner, "synth", files["mnist_mlp"], tmp_path / "x.emt", "--sample-rate", 20e6)
    assert res.exit_code == 3


# -- extract ------------------------------------------------------------------

def test_extract_round_trip(runner, files, tmp_path):
    trace, report, arch = tmp_path / "t.emt", tmp_path / "r.json", tmp_path / "out.json"
    run(runner, "synth", files["mnist_cnn"], trace)
    res = run(runner, "extract", trace, "--input-shape", "28x1", "--report", report, "--arch-out", arch)
    assert res.exit_code == 0, res.output
    doc = json.loads(report.read_text())
    assert doc["resolved"] and doc["layer_count"] == 8
    assert Architecture.from_dict(doc["recovered"]) == Architecture.load(arch)
    assert doc["config"]["input_shape"] == "28x1"
    assert run(runner, "diff", files["mnist_cnn"], arch).exit_code == 0


def test_extract_truncated_file(runner, files, tmp_path):
    trace = tmp_path / "t.emt"
    run(runner, "synth", files["sp_mlp"], trace)
    trace.write_bytes(trace.read_bytes()[:-100])
    assert run(runner, "extract", trace, "--input-shape", "28x1").exit_code == 2


def test_extract_pure_noise(runner, tmp_path):
    trace, report = tmp_path / "noise.emt", tmp_path / "r.json"
    x = np.random.default_rng(0).standard_normal(300_000).astype(np.float32)
    tracefile.write_trace(trace, tracefile.Trace(200e6, x))
    assert run(runner, "extract", trace, "--input-shape", "28x1", "--report", report).exit_code == 4
    assert json.loads(report.read_text())["hypotheses"] == []


def test_extract_requires_shape(runner, files, tmp_path):
    trace = tmp_path / "t.emt"
    run(runner, "synth", files["sp_mlp"], trace)
    assert run(runner, "extract", trace).exit_code == 2
    assert run(runner, "extract", trace, "--input-shape", "28by1").exit_code == 2


def test_extract_bad_thresholds(runner, files, tmp_path):
    trace, th = tmp_path / "t.emt", tmp_path / "th.json"
    run(runner, "synth", files["sp_mlp"], trace)
    th.write_text(json.dumps({"k_sigma": 3.0, "nonsense": 1}))
    assert run(runner, "extract", trace, "--input-shape", "28x1", "--thresholds", th).exit_code == 2


def test_extract_unresolved_small_inputs_still_writes_guess(runner, files, tmp_path):
    trace, arch = tmp_path / "t.emt", tmp_path / "out.json"
    run(runner, "synth", files["sp_mlp"], trace)
    res = run(runner, "extract", trace, "--input-shape", "28x1", "--arch-out", arch)
    assert res.exit_code == 4
    assert run(runner, "diff", files["sp_mlp"], arch).exit_code == 0


# -- config -------------------------------------------------------------------

def test_config_file_supplies_options(runner, files, tmp_path):
    trace, report, conf = tmp_path / "t.emt", tmp_path / "r.json", tmp_path / "c.json"
    run(runner, "synth", files["mnist_cnn"], trace)
    conf.write_text(json.dumps({"extract": {"input_shape": "28x1", "report": str(report)}}))
    assert run(runner, "--config", conf, "extract", trace).exit_code == 0
    assert json.loads(report.read_text())["config"]["config_file"] == str(conf)


def test_flag_beats_config_and_env_var_is_read(runner, files, tmp_path):
    a, b, conf = tmp_path / "a.emt", tmp_path / "b.emt", tmp_path / "c.json"
    conf.write_text(json.dumps({"seed": 9, "synth": {"noise": 0.0, "average": 1}}))
    env = {"ARCHOSCOPE_CONFIG": str(conf)}
    run(runner, "synth", files["sp_mlp"], a, "--noise", 0.3, env=env)
    run(runner, "synth", files["sp_mlp"], b, "--noise", 0.3, "--average", 1, "--seed", 9)
    assert a.read_bytes() == b.read_bytes()


def test_bad_config_file(runner, files, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text("{not json")
    assert run(runner, "--config", conf, "diff", files["sp_mlp"], files["sp_mlp"]).exit_code == 2


# -- diff ---------------------------------------------------------------------

def test_diff_identical(runner, files):
    res = run(runner, "diff", files["cifar_cnn"], files["cifar_cnn"])
    assert res.exit_code == 0 and res.output == ""


def test_diff_one_field(runner, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    Architecture(TensorShape(28, 1), (ConvSpec(16, 3, 1, 1),)).save(a)
    Architecture(TensorShape(28, 1), (ConvSpec(32, 3, 1, 1),)).save(b)
    res = run(runner, "diff", a, b)
    assert res.exit_code == 1
    lines = res.output.strip().splitlines()
    assert lines == ["layer 1: k 16 != 32"]


def test_diff_schema_error(runner, files, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[]")
    assert run(runner, "diff", files["sp_mlp"], bad).exit_code == 2


# -- spectro ------------------------------------------------------------------

def test_spectro_boundaries_match_split(runner, files, tmp_path):
    trace, csv = tmp_path / "c.emt", tmp_path / "c.csv"
    run(runner, "synth", files["cifar_cnn"], trace)
    assert run(runner, "spectro", trace, csv).exit_code == 0
    grid = np.loadtxt(csv, delimiter=",", skiprows=1)
    energy = (grid[:, 1:] ** 2).sum(axis=1)
    active = energy > 20 * np.quantile(energy, 0.05)
    change = np.flatnonzero(np.diff(active.astype(np.int8))) + 1
    segs = split_layers(tracefile.read_trace(trace))
    hop, window = 128, 256
    bounds = np.array([b for s in segs for b in (s.start, s.end)])
    change_samples = change * hop + window // 2
    # every layer boundary shows up in the exported grid
    assert all(np.abs(change_samples - b).min() <= 2 * hop for b in bounds)
    # the only other change-points are the silences inside pooling layers
    extra = [c for c in change_samples if np.abs(bounds - c).min() > 2 * hop]
    pools = [segs[i] for i in (2, 5, 8)]
    assert extra and all(any(p.start < c < p.end for p in pools) for c in extra)


def test_spectro_png(runner, files, tmp_path):
    trace, png = tmp_path / "t.emt", tmp_path / "t.png"
    run(runner, "synth", files["sp_mlp"], trace)
    assert run(runner, "spectro", trace, png, "--window", 128, "--hop", 64).exit_code == 0
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_spectro_silence_uniform(runner, tmp_path):
    trace, csv = tmp_path / "s.emt", tmp_path / "s.csv"
    x = np.random.default_rng(1).standard_normal(1 << 16).astype(np.float32) * 1e-3
    tracefile.write_trace(trace, tracefile.Trace(200e6, x))
    assert run(runner, "spectro", trace, csv).exit_code == 0
    per_bin = np.loadtxt(csv, delimiter=",", skiprows=1)[:, 2:-1].mean(axis=0)
    assert per_bin.max() / per_bin.min() < 1.5


def test_spectro_window_larger_than_trace(runner, tmp_path):
    trace = tmp_path / "short.emt"
    tracefile.write_trace(trace, tracefile.Trace(200e6, np.zeros(100, dtype=np.float32)))
    assert run(runner, "spectro", trace, tmp_path / "x.csv").exit_code == 2


def test_spectro_bad_extension(runner, files, tmp_path):
    trace = tmp_path / "t.emt"
    run(runner, "synth", files["sp_mlp"], trace)
    assert run(runner, "spectro", trace, tmp_path / "x.jpg").exit_code == 2
