"""Acceptance gate: one test per criterion, each recorded for the terminal summary."""

import time

import numpy as np
from click.testing import CliRunner

from archoscope import fixtures
from archoscope.cli import main
from archoscope.emulator import CostModel, EventClass, emulate_inference
from archoscope.extraction import (
    SIGMOID_OR_TANH,
    LayerKind,
    MultipleSolutions,
    NoSolution,
    Thresholds,
    extract_architecture,
    solve_stride_padding,
)
from archoscope.model import (
    ActivationKind,
    ActivationSpec,
    Architecture,
    ConvSpec,
    DenseSpec,
    TensorShape,
    diff_architectures,
    input_shapes,
    layer_to_dict,
    mac_complexity,
    relu_or_not,
)
from archoscope.render import MIN_CLASS_AMPLITUDE, RenderParams, render_trace

E = EventClass


def record(acceptance, n, passed, detail):
    acceptance[n] = (bool(passed), detail)
    assert passed, detail


def conv_layers(root):
    return [l for l in root.layers() if ":conv2d" in l.label]


def test_criterion_1_gemm_call_counts(acceptance):
    t0 = time.perf_counter()
    counts = {}
    for name in ("mnist_cnn", "cifar_cnn"):
        root = emulate_inference(fixtures.REFERENCE_MODELS[name]())
        counts[name] = [len(l.children_of(E.GEMM_CALL)) for l in conv_layers(root)]
    elapsed = time.perf_counter() - t0
    ok = counts == {"mnist_cnn": [392, 98], "cifar_cnn": [512, 128, 32]} and elapsed < 1.0
    record(acceptance, 1, ok, f"calls {counts} in {elapsed:.3f}s")


def test_criterion_2_mac_figures(acceptance):
    cnn, mlp = fixtures.mnist_cnn(), fixtures.mnist_mlp()
    got = (mac_complexity(cnn.layers[0], cnn.input_shape), mac_complexity(mlp.layers[0], mlp.input_shape))
    record(acceptance, 2, got == (112896, 25088), f"macs {got}")


def test_criterion_3_nested_counts(acceptance):
    mnist = conv_layers(emulate_inference(fixtures.mnist_cnn()))
    cifar = conv_layers(emulate_inference(fixtures.cifar_cnn()))

    def pairs(layer):
        return {len(c.children_of(E.GEMM_KERNEL_PAIR)) for c in layer.children_of(E.GEMM_CALL)}

    def groups(layer):
        return {len(p.children_of(E.SIMD_MAC_GROUP)) for c in layer.children_of(E.GEMM_CALL)
                for p in c.children_of(E.GEMM_KERNEL_PAIR)}

    got = (pairs(mnist[0]), pairs(mnist[1]), groups(cifar[1]), groups(cifar[2]))
    record(acceptance, 3, got == ({8}, {16}, {36}, {72}), f"pairs/call {got[:2]}, groups/pair {got[2:]}")


def test_criterion_4_reference_fixtures_round_trip(acceptance, tmp_path):
    runner = CliRunner()
    t0 = time.perf_counter()
    outcome = {}
    for name, make in fixtures.REFERENCE_MODELS.items():
        arch = make()
        src, trace, out = tmp_path / f"{name}.json", tmp_path / f"{name}.emt", tmp_path / f"{name}.out.json"
        arch.save(src)
        synth = runner.invoke(main, ["synth", str(src), str(trace), "--seed", "1"])
        shape = f"{arch.input_shape.h}x{arch.input_shape.c}"
        ext = runner.invoke(main, ["extract", str(trace), "--input-shape", shape, "--arch-out", str(out)])
        diff = runner.invoke(main, ["diff", str(src), str(out)]) if out.exists() else None
        outcome[name] = (synth.exit_code, ext.exit_code, diff.exit_code if diff else None,
                         diff.output.strip() if diff else "")
    elapsed = time.perf_counter() - t0
    ok = all(s == 0 and d == 0 for s, _, d, _ in outcome.values()) and elapsed < 60
    detail = ", ".join(f"{n}: diff={d} extract={e}" for n, (_, e, d, _) in outcome.items())
    record(acceptance, 4, ok, f"{detail}; {elapsed:.1f}s")


def test_criterion_5_random_round_trip(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures = []
    for i in range(200):
        arch = fixtures.random_architecture(rng)
        trace = render_trace(emulate_inference(arch), RenderParams(rng_seed=i))
        guess = extract_architecture(trace, arch.input_shape).best_guess
        lines = diff_architectures(arch, guess) if guess else ["no reconstruction"]
        if lines:
            failures.append((i, lines[:2]))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 600
    record(acceptance, 5, ok, f"{200 - len(failures)}/200 exact in {elapsed:.0f}s {failures[:3]}")


def stride_padding_oracle(h_in, h_out, z, max_stride):
    return sorted((s, p) for s in range(1, max_stride + 1) for p in range(z)
                  if h_in - z + 2 * p >= 0 and (h_in - z + 2 * p) % s == 0
                  and (h_in - z + 2 * p) // s + 1 == h_out)


def test_criterion_6_solver_matches_oracle(acceptance):
    mismatches, checked = [], 0
    for h_in in range(1, 65):
        for z in (1, 3, 5, 7):
            for h_out in range(1, h_in + z):
                expected = stride_padding_oracle(h_in, h_out, z, 8)
                try:
                    got, flag = [solve_stride_padding(h_in, h_out, z, max_stride=8)], "unique"
                except MultipleSolutions as exc:
                    got, flag = sorted(exc.solutions), "multiple"
                except NoSolution:
                    got, flag = [], "none"
                want = {0: "none", 1: "unique"}.get(len(expected), "multiple")
                checked += 1
                if got != expected or flag != want:
                    mismatches.append((h_in, h_out, z, got, expected))
    record(acceptance, 6, not mismatches, f"{checked} (h_in, h_out, z) cases, mismatches {mismatches[:3]}")


def test_criterion_7_dense_remainders(acceptance):
    arch = fixtures.sp_mlp()
    trace = render_trace(emulate_inference(arch), RenderParams())
    report = extract_architecture(trace, arch.input_shape)
    first = report.hypotheses[0]
    counts = (first.pattern_counts.get("neuron_groups"), first.pattern_counts.get("remainder_neurons"))
    small = [(h.params.get("n_e"), h.confidence) for h, shape in zip(report.hypotheses, input_shapes(arch))
             if h.kind is LayerKind.DENSE and shape.size < Thresholds().dense_min_input]
    ok = (counts == (5, 3) and first.params.get("n_e") == 23 and small
          and all(c < 0.5 for _, c in small) and not report.resolved)
    record(acceptance, 7, ok, f"layer 1 {counts[0]}+{counts[1]}={first.params.get('n_e')}, "
                              f"small-input (n_e, confidence) {[(n, round(c, 2)) for n, c in small]}")


def activation_fixture(rng, kind):
    """A MAC layer of random size followed by the activation under test."""
    if rng.random() < 0.5:
        shape = TensorShape(int(rng.choice([4, 6, 8])), int(rng.integers(1, 4)))
        head = ConvSpec(int(rng.integers(2, 17)), 3, 1, 1)
    else:
        shape = TensorShape(int(rng.choice([2, 4, 6])), int(rng.integers(1, 5)))
        head = DenseSpec(int(rng.integers(1, 129)))
    return Architecture(shape, (head, ActivationSpec(kind)))


def test_criterion_8_activation_discrimination(acceptance):
    rng = np.random.default_rng(8)
    kinds = (ActivationKind.RELU, ActivationKind.SIGMOID, ActivationKind.TANH)
    correct, total, wrong = 0, 0, []
    for kind in kinds:
        for i in range(50):
            arch = activation_fixture(rng, kind)
            trace = render_trace(emulate_inference(arch), RenderParams(rng_seed=i))
            hyps = extract_architecture(trace, arch.input_shape).hypotheses
            got = hyps[1].params.get("kind") if len(hyps) == 2 else None
            want = "relu" if kind is ActivationKind.RELU else SIGMOID_OR_TANH
            total += 1
            if got == want:
                correct += 1
            else:
                wrong.append((kind.value, layer_to_dict(arch.layers[0]), got))
    acc = correct / total
    record(acceptance, 8, acc >= 0.98, f"accuracy {correct}/{total} = {acc:.3f} {wrong[:3]}")


def confidently_wrong(arch, report, floor):
    """Hypotheses at or above ``floor`` whose layer disagrees with the truth."""
    bad = []
    for i, hyp in enumerate(report.hypotheses):
        if hyp.confidence < floor:
            continue
        layer = hyp.to_layer()
        truth = arch.layers[i] if i < len(arch.layers) else None
        if layer is None or truth is None or type(layer) is not type(truth):
            bad.append(i)
        elif isinstance(truth, ActivationSpec):
            if relu_or_not(layer) != relu_or_not(truth):
                bad.append(i)
        elif layer_to_dict(layer) != layer_to_dict(truth):
            bad.append(i)
    return bad


def test_criterion_9_noise_degradation(acceptance, tmp_path):
    names = list(fixtures.REFERENCE_MODELS)
    floor = Thresholds().confidence_floor
    models = {n: fixtures.REFERENCE_MODELS[n]() for n in names}
    roots = {n: (a, emulate_inference(a, CostModel())) for n, a in models.items()}
    sigma = 2 * MIN_CLASS_AMPLITUDE
    wrong, resolved = [], []
    for seed in range(50):
        name = names[seed % len(names)]
        arch, root = roots[name]
        trace = render_trace(root, RenderParams(noise_sigma=sigma, n_average=1, rng_seed=seed))
        report = extract_architecture(trace, arch.input_shape)
        bad = confidently_wrong(arch, report, floor)
        if bad:
            wrong.append((seed, name, bad))
        if report.resolved:
            resolved.append((seed, name))

    runner = CliRunner()
    src = tmp_path / "a.json"
    fixtures.sp_mlp().save(src)
    codes = []
    for seed in range(3):
        trace = tmp_path / f"n{seed}.emt"
        runner.invoke(main, ["synth", str(src), str(trace), "--noise", str(sigma), "--average", "1",
                             "--seed", str(seed)])
        codes.append(runner.invoke(main, ["extract", str(trace), "--input-shape", "28x1"]).exit_code)
    ok = not wrong and not resolved and codes == [4, 4, 4]
    record(acceptance, 9, ok, f"confidently wrong {len(wrong)}/50, resolved {len(resolved)}/50, "
                              f"cli exit codes {codes}")
