"""Acceptance criteria 1 to 11, one test each.

Each test prints a single ``criterion N: PASS|FAIL`` line with its runtime
and fails if the property or the runtime bound does not hold.
"""

import contextlib
import itertools
import json
import math
import time

import numpy as np
import pytest

from libragrad import cli, layers, oracles
from libragrad import engine as E
from libragrad.attribution import fullgrad, integrated_gradients
from libragrad.engine import Tape
from libragrad.metrics import LinearScorer, completeness_error, faithfulness, synthetic_task
from libragrad.models import FunctionModel, LayerSpec, build_mixer, build_vit
from libragrad.policy import GradPolicy
from libragrad.rng import Rng

EPS_GRID = [10.0 ** -k for k in range(1, 9)]


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, bound=None):
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield
            elapsed = time.perf_counter() - t0
            if bound is not None:
                assert elapsed < bound, f"took {elapsed:.1f} s, bound {bound} s"
            status = "PASS"
        finally:
            elapsed = time.perf_counter() - t0
            limit = f" (bound {bound} s)" if bound is not None else ""
            with capsys.disabled():
                print(f"\ncriterion {number}: {status} in {elapsed:.2f} s{limit}")
    return run


def jvp_x(fn, x):
    """``J_x f . x`` for every output coordinate."""
    tape = Tape()
    t = tape.input(x)
    out = fn(t)
    res = np.empty(out.value.size)
    for k in range(out.value.size):
        res[k] = np.sum(tape.backward(out, k)[t] * x)
    return res.reshape(out.shape), out.value


def test_1_gradient_correctness(criterion):
    with criterion(1, bound=30):
        prim = oracles.gradcheck_primitives(seed=0, cases=100)
        libra = oracles.gradcheck_libra(seed=0, cases=100)
        assert {"libra-layernorm", "libra-attention", "libra-gelu", "libra-silu"} <= set(libra)
        worst = max({**prim, **libra}.items(), key=lambda kv: kv[1])
        assert worst[1] < 1e-6, worst


def _affine_stack(r, depth, width):
    Ws = [r.normal((width, width)) / math.sqrt(width) for _ in range(depth)]
    bs = [r.normal((width,)) for _ in range(depth)]

    def fn(tape, t, policy):
        for i, (W, b) in enumerate(zip(Ws, bs)):
            t = layers.linear(t, W, b, layer=i, token_axis=None)
        return t
    return fn


def _relu_mlp(r, width, x):
    W1, b1 = r.normal((12, width)), r.normal((12,))
    while np.min(np.abs(W1 @ x + b1)) < 1e-3:
        b1 = r.normal((12,))
    W2, b2 = r.normal((4, 12)), r.normal((4,))

    def fn(tape, t, policy):
        h = E.relu(layers.linear(t, W1, b1, layer=0, token_axis=None))
        return layers.linear(h, W2, b2, layer=1, token_axis=None)
    return fn


def _residual_net(r, width, x, blocks=3):
    params, v = [], x.copy()
    for _ in range(blocks):
        W, b = r.normal((width, width)) / math.sqrt(width), r.normal((width,))
        # keep every pre-activation off the ReLU kink
        b = b + np.where(np.abs(W @ v + b) < 1e-3, 1e-2, 0.0)
        params.append((W, b))
        v = v + np.maximum(W @ v + b, 0.0)

    def fn(tape, t, policy):
        for i, (W, b) in enumerate(params):
            t = E.add(t, E.relu(layers.linear(t, W, b, layer=i, token_axis=None)))
        return t
    return fn


def test_2_piecewise_affine_completeness(criterion):
    with criterion(2, bound=10):
        worst = 0.0
        for k in range(30):
            r = Rng(200, stream=k)
            x = r.normal((8,))
            for fn in (_affine_stack(r, 1 + k % 4, 8), _relu_mlp(r, 8, x), _residual_net(r, 8, x)):
                rep = oracles.fg_residual(fn, x, target=k % 4)
                worst = max(worst, rep.relative)
        assert worst < 1e-10, worst


def _branch_pair(k):
    r = Rng(300, stream=k)
    x = r.normal((6,))
    W1, c1, W2, c2 = r.normal((5, 6)), r.normal((5,)), r.normal((5, 6)), r.normal((5,)) + 5.0

    def branches(t):
        # one affine branch and one ReLU branch, both FullGrad-complete
        f1 = E.relu(layers.linear(t, W1, c1, name="b1", token_axis=None))
        f2 = layers.linear(t, W2, c2, name="b2", token_axis=None)
        return f1, f2
    return x, branches


def test_3_products(criterion):
    with criterion(3):
        for k in range(25):
            x, branches = _branch_pair(k)

            def naive(tape, t, policy):
                return E.reduce_sum(layers.self_gate(*branches(t)))

            rep = oracles.fg_residual(naive, x)
            assert abs(rep.grad_sum + rep.bias_sum - 2 * rep.f_value) < 1e-10 * abs(rep.f_value)

            a = Rng(301, stream=k).uniform()
            for coeffs in ((a, 1.0 - a), (0.0, 1.0), (1.0, 0.0)):
                def scaled(tape, t, policy, coeffs=coeffs):
                    return E.reduce_sum(layers.self_gate(*branches(t), "libra", coeffs))

                rep = oracles.fg_residual(scaled, x)
                assert rep.relative < 1e-10, (coeffs, rep)


def test_4_division(criterion):
    with criterion(4):
        for k in range(25):
            x, branches = _branch_pair(k)

            def quotient(tape, t, policy):
                f1, f2 = branches(t)
                return E.reduce_sum(E.div(f1, f2))

            rep = oracles.fg_residual(quotient, x)
            assert abs(rep.grad_sum + rep.bias_sum) < 1e-10

            def detached(tape, t, policy):
                f1, f2 = branches(t)
                return E.reduce_sum(E.div(f1, E.detach(f2)))

            rep = oracles.fg_residual(detached, x)
            assert rep.relative < 1e-10, rep


def test_5_layernorm(criterion):
    with criterion(5):
        for k in range(10):
            x = Rng(500, stream=k).normal((4, 16))
            for eps in EPS_GRID:
                val, _ = jvp_x(lambda t: layers.layernorm(t, eps), x)
                assert np.max(np.abs(val - oracles.ln_closed_form(x, eps))) < 1e-10

        x = Rng(501).normal((16,))
        norms = [np.linalg.norm(jvp_x(lambda t: layers.layernorm(t, eps), x)[0]) for eps in EPS_GRID]
        assert all(a > b for a, b in zip(norms, norms[1:]))

        ln = FunctionModel(lambda tape, t, policy: layers.layernorm(t, 1e-8))
        m = fullgrad(ln, x[None, :], policy=GradPolicy.standard(include_biases=False))
        assert abs(m.total) < 1e-6
        assert abs(m.output_value) > 0.5 and 1.0 <= np.linalg.norm(ln.logits(x[None, :])) <= 10.0

        for k in range(10):
            x = Rng(502, stream=k).normal((3, 16))
            val, out = jvp_x(lambda t: layers.layernorm(t, 1e-5, "libra"), x)
            assert np.max(np.abs(val - out)) < 1e-12


def test_6_silu(criterion):
    with criterion(6):
        x = 3.0 * Rng(600).normal((200,))
        val, _ = jvp_x(lambda t: layers.gated_activation(t, "silu"), x)
        assert np.max(np.abs(val - oracles.silu_fg_sum(x))) < 1e-10

        one = np.array([1.0])
        std, _ = jvp_x(lambda t: layers.gated_activation(t, "silu"), one)
        lib, out = jvp_x(lambda t: layers.gated_activation(t, "silu", "libra"), one)
        assert round(std[0], 3) == 0.928
        assert round(lib[0], 3) == 0.731 and abs(lib[0] - out[0]) < 1e-15


def test_7_integrated_gradients(criterion):
    with criterion(7):
        # input of std 4: the 50-step IG sum scales as n^2 eps / sigma^3
        x = 4.0 * Rng(700).normal((1, 16))
        sums, values = [], []
        for eps in EPS_GRID:
            ln = FunctionModel(lambda tape, t, policy, eps=eps: layers.layernorm(t, eps))
            m = integrated_gradients(ln, x, steps=50, target=int(np.argmax(np.abs(x))))
            closed = oracles.ln_ig_closed_form(x, eps)[0, m.target]
            assert abs(m.total - closed) < 1e-8 * max(1.0, abs(closed))
            sums.append(abs(m.total))
            values.append(abs(m.output_value))
        assert all(a > b for a, b in zip(sums, sums[1:]))
        assert sums[-1] < 1e-5
        assert min(values) > 1.0

        model = build_vit(LayerSpec(depth=0, final_norm=False), seed=7).with_biases_zeroed()
        for k in range(10):
            x = Rng(701, stream=k).normal((8, 16))
            m = integrated_gradients(model, x, steps=50)
            assert abs(m.total - model.logits(x)[m.target]) < 1e-12


def test_8_fair_transformers(criterion):
    spec = LayerSpec(dim=16, heads=2, tokens=8, depth=2)
    with criterion(8, bound=60):
        for build in (build_vit, build_mixer):
            model = build(spec, seed=8)
            inputs = [Rng(800, stream=k).normal((8, 16)) for k in range(100)]
            for policy, check in ((GradPolicy.libra(), lambda m: m < 1e-8),
                                  (GradPolicy.standard(), lambda m: m > 1e-3)):
                rel = [completeness_error(model, x, fullgrad(model, x, policy=policy)).relative
                       for x in inputs]
                assert check(np.median(rel)), (build.__name__, policy.label, np.median(rel))


def test_9_ablation(criterion):
    model = build_vit(LayerSpec(), seed=9)
    inputs = [Rng(900, stream=k).normal((8, 16)) for k in range(8)]
    with criterion(9):
        complete = []
        for flags in itertools.product((False, True), repeat=4):
            for include in (True, False):
                policy = GradPolicy(*flags, include_biases=include)
                ce = []
                for x in inputs:
                    m = fullgrad(model, x, policy=policy)
                    err = completeness_error(model, x, m)
                    ce.append(err.relative)
                    if not include:
                        run = model.run(x, policy.with_(include_biases=True))
                        g = run.tape.backward(run.logits, m.target)
                        signed = m.output_value - m.total - g.bias_total
                        # without biases CE is exactly the missing bias term plus
                        # any residual the flags leave
                        assert abs(err.absolute - abs(signed + g.bias_total)) < 1e-12
                        if policy.is_full_libra:
                            assert abs(err.absolute - abs(g.bias_total)) < 1e-10 * (1 + abs(m.output_value))
                if max(ce) < 1e-8:
                    complete.append(policy.label)
        assert complete == ["libra"], complete


def test_10_faithfulness(criterion):
    with criterion(10, bound=120):
        model = build_vit(LayerSpec(), seed=10)
        inputs, labels, _ = synthetic_task(6, 8, 16, 10, seed=10)
        for variant in ("accuracy/predicted", "aopc/predicted", "accuracy/ground-truth",
                        "aopc/ground-truth"):
            for method in ("fullgrad", "ixg"):
                rep = faithfulness(model, inputs, method, GradPolicy.libra(), variant, labels)
                assert abs(rep.mif_norm - (100 - rep.mif)) < 1e-12
                assert abs(rep.srg - (rep.lif + rep.mif_norm) / 2) < 1e-12
                for r in rep.rows:
                    assert abs(r.mif_norm - (100 - r.mif)) < 1e-12
                    assert abs(r.srg - (r.lif + r.mif_norm) / 2) < 1e-12

        for seed in (0, 1, 2):
            w = Rng(1000, stream=seed).normal((8,))
            scorer = LinearScorer(w if w.sum() > 0 else -w)
            x = np.ones(8)
            bf = oracles.brute_force_orderings(scorer, x, 8, "aopc")
            assert len(bf.aucs) == math.factorial(8)
            rep = faithfulness(scorer, [x], scorer.exact_attribution, variant="aopc")
            assert abs(rep.mif - bf.min_auc) < 1e-12


def test_11_cli_determinism(criterion, tmp_path):
    cfg = {"model": {"tokens": 4, "depth": 1}, "inputs": 2, "ig_steps": 4, "gradcheck_cases": 3,
           "eps_grid": [1e-2, 1e-5, 1e-8], "methods": ["fullgrad", "ig", "gradcam"]}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    with criterion(11):
        for command in cli.COMMANDS:
            outs = []
            for rep in ("a", "b"):
                out = tmp_path / f"{command}-{rep}"
                assert cli.main([command, "--config", str(path), "--out", str(out), "--seed", "5"]) == 0
                outs.append(out)
            files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
            assert files, command
            for rel in files:
                assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), (command, rel)
