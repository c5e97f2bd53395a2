import math

import numpy as np
import pytest

from libragrad import layers, oracles
from libragrad import engine as E
from libragrad.attribution import (
    METHODS,
    AttributionError,
    AttributionMap,
    attribute,
    fullgrad,
    fullgrad_plus,
    gradcam,
    hirescam,
    integrated_gradients,
    ixg,
    map_record,
    read_pgm,
    render_map,
    write_pgm,
    xgradcam_plus,
)
from libragrad.models import FunctionModel, LayerSpec, build_mixer, build_vit
from libragrad.policy import GradPolicy
from libragrad.rng import Rng

from conftest import TOY, draws

AFFINE = LayerSpec(depth=0, final_norm=False)


@pytest.fixture(scope="module")
def linear_model():
    """Depth-0 model with every bias zeroed: a linear map of the tokens."""
    return build_vit(AFFINE, seed=3).with_biases_zeroed()


def ln_model(eps):
    return FunctionModel(lambda tape, x, policy: layers.layernorm(x, eps))


class TestIxG:
    def test_linear_map_sum(self, linear_model):
        for x in draws(5, (8, 16), seed=2):
            m = ixg(linear_model, x)
            f = linear_model.logits(x)[m.target]
            assert abs(m.per_feature.sum() - f) < 1e-15 + 1e-12 * abs(f)
            assert m.bias_total == 0.0

    def test_zero_input(self, vit):
        m = ixg(vit, np.zeros((8, 16)), target=0)
        assert not np.any(m.per_feature) and not np.any(m.per_token)

    def test_libra_needs_biases(self, vit, x_toy):
        p = GradPolicy.libra()
        f = vit.logits(x_toy).max()
        assert abs(ixg(vit, x_toy, policy=p).per_feature.sum() - f) > 1e-4
        assert abs(fullgrad(vit, x_toy, policy=p).total - f) < 1e-8 * (1 + abs(f))

    def test_target_range(self, vit, x_toy):
        with pytest.raises(AttributionError):
            ixg(vit, x_toy, target=10)
        with pytest.raises(AttributionError):
            ixg(vit, x_toy, target=-1)

    def test_per_token_is_channel_sum(self, vit, x_toy):
        m = ixg(vit, x_toy)
        assert np.array_equal(m.per_token, m.per_feature.sum(axis=1))

    def test_default_target_is_argmax(self, vit, x_toy):
        assert ixg(vit, x_toy).target == vit.predict(x_toy)


class TestFullGrad:
    def test_single_affine_layer(self):
        r = Rng(4)
        W, b = r.normal((3, 5)), r.normal((3,))
        model = FunctionModel(lambda tape, x, p: layers.linear(x, W, b))
        x = r.normal((2, 5))
        m = fullgrad(model, x)
        assert m.total == pytest.approx(model.logits(x)[m.target], abs=1e-15)

    def test_libra_toy_vit(self, vit):
        for x in draws(10, (8, 16), seed=6):
            m = fullgrad(vit, x, policy=GradPolicy.libra())
            f = vit.logits(x)[m.target]
            assert abs(m.total - f) < 1e-8 * (1 + abs(f))

    def test_bias_per_token_accounts_for_total(self, vit, mixer, x_toy):
        for model in (vit, mixer, build_vit(LayerSpec(pooling="cls"), seed=0)):
            m = fullgrad(model, x_toy, policy=GradPolicy.libra())
            assert m.bias_per_token.sum() == pytest.approx(m.bias_total, abs=1e-12)
            np.testing.assert_allclose(m.per_token, m.per_feature.sum(1) + m.bias_per_token,
                                       atol=1e-15)
            assert m.per_token.sum() == pytest.approx(m.total, abs=1e-12)

    def test_isolated_layernorm_closed_form(self):
        x = Rng(5).normal((1, 6))
        totals = []
        for k in range(1, 9):
            eps = 10.0 ** -k
            m = ixg(ln_model(eps), x, target=2)
            closed = oracles.ln_closed_form(x, eps)[0, 2]
            assert abs(m.total - closed) < 1e-10
            totals.append(abs(m.total))
        assert all(a > b for a, b in zip(totals, totals[1:]))
        assert totals[-1] < 1e-7

    def test_no_biases_registered(self):
        model = FunctionModel(lambda tape, x, p: E.scale(x, 2.0))
        with pytest.raises(AttributionError):
            fullgrad(model, np.ones((2, 2)), target=0)
        m = fullgrad(model, np.ones((2, 2)), target=0, policy=GradPolicy(include_biases=False))
        assert m.bias_total == 0.0

    def test_bias_contributions_listed(self, vit, x_toy):
        m = fullgrad(vit, x_toy)
        contrib = m.extras["bias_contributions"]
        assert set(contrib) == set(vit.bias_layers)
        assert sum(contrib.values()) == pytest.approx(m.bias_total, abs=1e-15)


class TestFullGradPlus:
    def test_depth_zero_coincides(self):
        model = build_vit(AFFINE, seed=1)
        x = Rng(2).normal((8, 16))
        a, b = fullgrad(model, x), fullgrad_plus(model, x)
        np.testing.assert_array_equal(a.per_token, b.per_token)

    def test_depth_one_adds_block_term(self, x_toy):
        model = build_vit(LayerSpec(depth=1), seed=1)
        a, b = fullgrad(model, x_toy), fullgrad_plus(model, x_toy)
        run = model.run(x_toy)
        g = run.tape.backward(run.logits, a.target)
        (h,) = run.block_inputs
        extra = (h.value * g[h]).sum(axis=1)
        np.testing.assert_allclose(b.per_token, a.per_token + extra, atol=1e-15)

    @pytest.mark.parametrize("build", [build_vit, build_mixer])
    def test_layer_terms_telescope(self, build, x_toy):
        model = build(TOY, seed=2)
        m = fullgrad_plus(model, x_toy, policy=GradPolicy.libra())
        f = m.output_value
        contrib = m.extras["bias_contributions"].values()
        for l, term in enumerate(m.extras["layer_terms"]):
            # term l is the input to block l; the input itself is term 0
            downstream = sum(v for layer, v in contrib if layer >= l)
            assert abs(term - (f - downstream)) < 1e-10

    def test_zero_everything(self):
        model = build_vit(TOY, seed=0).with_biases_zeroed()
        m = fullgrad_plus(model, np.zeros((8, 16)), target=0)
        assert not np.any(m.per_token)


class TestIntegratedGradients:
    def test_linear_exact(self, linear_model):
        x = Rng(3).normal((8, 16))
        for steps in (1, 7, 50):
            m = integrated_gradients(linear_model, x, steps=steps)
            f = linear_model.logits(x)[m.target]
            assert abs(m.total - f) < 1e-12

    def test_single_step_is_ixg(self, vit, x_toy):
        a = integrated_gradients(vit, x_toy, steps=1)
        b = ixg(vit, x_toy)
        np.testing.assert_array_equal(a.per_feature, b.per_feature)

    def test_baseline_equal_input(self, vit, x_toy):
        m = integrated_gradients(vit, x_toy, baseline=x_toy, steps=5)
        assert not np.any(m.per_feature)

    def test_layernorm_vanishes(self):
        x = 4.0 * Rng(0).normal((1, 16))
        sums = []
        for k in range(1, 9):
            eps = 10.0 ** -k
            ln = ln_model(eps)
            m = integrated_gradients(ln, x, steps=50, target=3)
            closed = oracles.ln_ig_closed_form(x, eps)[0, 3]
            assert abs(m.total - closed) < 1e-8 * max(1.0, abs(closed))
            assert abs(m.output_value) > 0.1
            sums.append(abs(m.total))
        assert all(a > b for a, b in zip(sums, sums[1:]))

    def test_errors(self, vit, x_toy):
        with pytest.raises(AttributionError):
            integrated_gradients(vit, x_toy, steps=0)
        with pytest.raises(AttributionError):
            integrated_gradients(vit, x_toy, baseline=np.zeros((3, 16)))


class TestCams:
    def test_single_token(self):
        model = build_vit(LayerSpec(tokens=1), seed=0)
        x = Rng(1).normal((1, 16))
        for t in range(10):
            g, h = gradcam(model, x, target=t), hirescam(model, x, target=t)
            np.testing.assert_allclose(g.per_token, np.maximum(h.per_token, 0.0), atol=1e-15)

    def test_constant_activations(self):
        w = Rng(2).normal((4, 3))
        model = FunctionModel(lambda tape, x, p: E.matmul(E.reduce_sum(x, 0), tape.constant(w)))
        x = np.ones((5, 4))
        for t in range(3):
            m = gradcam(model, x, target=t)
            np.testing.assert_allclose(m.extras["weights"], w[:, t], atol=1e-15)
            np.testing.assert_allclose(m.per_token, np.full(5, max(w[:, t].sum(), 0.0)), atol=1e-15)

    def test_hirescam_depth_zero(self):
        model = build_vit(AFFINE, seed=4)
        x = Rng(5).normal((8, 16))
        m = hirescam(model, x)
        P = model.params
        h = x @ P["embed.weight"].T + P["embed.bias"] + P["pos_embed"]
        expected = h @ P["head.weight"][m.target] / 8
        np.testing.assert_allclose(m.per_token, expected, atol=1e-15)

    @pytest.mark.parametrize("cam", [gradcam, xgradcam_plus])
    def test_non_negative(self, cam, vit):
        for x in draws(5, (8, 16), seed=12):
            for t in (0, 4, 9):
                assert np.all(cam(vit, x, target=t).per_token >= 0)

    def test_cls_row_dropped(self, x_toy):
        model = build_vit(LayerSpec(pooling="cls"), seed=0)
        assert hirescam(model, x_toy).per_token.shape == (8,)


@pytest.mark.parametrize("method", sorted(METHODS))
def test_methods_run_under_every_policy(method, vit, x_toy):
    shapes = set()
    for p in GradPolicy.combinations():
        m = attribute(method, vit, x_toy, target=1, policy=p, ig_steps=3)
        assert isinstance(m, AttributionMap)
        shapes.add((m.per_feature.shape, m.per_token.shape))
    assert shapes == {((8, 16), (8,))}


def test_unknown_method(vit, x_toy):
    with pytest.raises(AttributionError):
        attribute("lrp", vit, x_toy)


class TestRender:
    def test_equal_positive(self):
        img = render_map(np.full(16, 0.3), upscale=4)
        assert img.shape == (16, 16)
        np.testing.assert_allclose(img, 1.0, atol=1e-12)

    def test_all_negative(self):
        assert not np.any(render_map(-np.arange(1.0, 17.0)))

    def test_single_hot_token(self):
        v = np.zeros(16)
        v[5] = 2.0
        img = render_map(v, upscale=4)
        assert img.max() == 1.0
        peak = np.argwhere(img == 1.0)
        assert set(map(tuple, peak)) == {(5, 5), (5, 6), (6, 5), (6, 6)}
        # unclamped values follow the bicubic kernel
        p99 = np.percentile(np.maximum(v, 0), 99)
        ref = np.clip(oracles.bicubic_reference((v / p99).reshape(4, 4), 4), 0, 1)
        np.testing.assert_allclose(img, ref, atol=1e-12)
        assert img[5, 8] < img[5, 6]
        np.testing.assert_allclose(img[4:8, 4:8], img[4:8, 4:8].T, atol=1e-15)

    def test_keys_kernel_value(self):
        # kernel at quarter-pixel offsets, a = -0.75
        assert oracles.keys_cubic(0.125) == pytest.approx(0.96728515625, abs=1e-15)
        assert oracles.keys_cubic(1.0) == 0.0 and oracles.keys_cubic(0.0) == 1.0

    def test_scale_invariant(self):
        v = Rng(3).normal((16,))
        np.testing.assert_allclose(render_map(v), render_map(7.5 * v), atol=1e-12)

    def test_non_square(self):
        with pytest.raises(AttributionError):
            render_map(np.ones(8))
        assert render_map(np.ones(8), upscale=2, grid=(2, 4)).shape == (4, 8)

    def test_pgm_round_trip(self, tmp_path):
        img = render_map(Rng(1).normal((16,)), upscale=3)
        path = tmp_path / "m.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
        assert path.read_bytes().startswith(b"P5\n12 12\n255\n")
        assert not (tmp_path / "m.pgm.tmp").exists()

    def test_record(self, vit, x_toy):
        m = fullgrad(vit, x_toy)
        rec = map_record(m, ce=0.25)
        assert rec["method"] == "fullgrad" and rec["target"] == m.target
        assert rec["policy"]["include_biases"] is True
        assert len(rec["per_token"]) == 8 and rec["ce"] == 0.25
