import math

import numpy as np
import pytest

from wdcodec import autodiff as ad
from wdcodec.autodiff import (
    AdamState,
    Graph,
    GraphError,
    ParamSet,
    adam_step,
    backward_grad,
    forward_eval,
    soft_quantize,
)


def fd_check(g, params, inputs=None, h=1e-4, rtol=1e-4, atol=1e-7):
    """Central finite differences on every parameter coordinate."""
    inputs = inputs or {}
    _, grads, _ = backward_grad(g, params, inputs)
    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            up = {k: v.copy() for k, v in params.items()}
            dn = {k: v.copy() for k, v in params.items()}
            up[name][idx] += h
            dn[name][idx] -= h
            fu, _ = forward_eval(g, up, inputs)
            fd, _ = forward_eval(g, dn, inputs)
            num = (float(fu) - float(fd)) / (2 * h)
            got = float(np.asarray(grads[name])[idx])
            err = abs(got - num) / max(abs(num), abs(got), atol / rtol)
            worst = max(worst, err)
            assert err < rtol, f"{name}{idx}: analytic {got} vs numeric {num}"
    return worst


def scalar_graph(build, *shapes, seed=0, low=-1.0, high=1.0):
    """Float64 graph with params p0, p1, ... and random values."""
    rng = np.random.default_rng(seed)
    g = Graph(dtype=np.float64)
    nodes = [g.param(f"p{i}", s) for i, s in enumerate(shapes)]
    g.set_output(build(g, *nodes))
    params = {f"p{i}": rng.uniform(low, high, size=s) for i, s in enumerate(shapes)}
    return g, params


class TestForwardEval:
    def test_identity_graph(self):
        g = Graph(dtype=np.float64)
        x = g.input("x", (2, 3))
        g.set_output(g.sum(x))
        val = np.arange(6, dtype=np.float64).reshape(2, 3)
        out, _ = forward_eval(g, {}, {"x": val})
        assert out == 15.0

    def test_sum_of_squares(self):
        g = Graph(dtype=np.float64)
        x = g.param("x", (2,))
        g.set_output(g.sum(g.square(x)))
        out, _ = forward_eval(g, {"x": np.array([1.0, 2.0])})
        assert out == 5.0

    def test_three_op_graph_matches_hand_composition(self):
        rng = np.random.default_rng(1)
        g = Graph(dtype=np.float64)
        x = g.param("x", (3, 4))
        y = g.param("y", (3, 4))
        out = g.mean(g.mul(g.exp(x), g.add(x, y)))
        g.set_output(out)
        xv = rng.normal(size=(3, 4))
        yv = rng.normal(size=(3, 4))
        got, _ = forward_eval(g, {"x": xv, "y": yv})
        np.testing.assert_allclose(got, np.mean(np.exp(xv) * (xv + yv)), rtol=1e-12)

    def test_aux_fetches(self):
        g = Graph(dtype=np.float64)
        x = g.param("x", (2,))
        sq = g.square(x)
        g.mark("squares", sq)
        g.set_output(g.sum(sq))
        _, aux = forward_eval(g, {"x": np.array([3.0, 4.0])})
        np.testing.assert_allclose(aux["squares"], [9.0, 16.0])

    def test_shape_and_missing_leaf_errors(self):
        g = Graph(dtype=np.float64)
        x = g.param("x", (2,))
        g.set_output(g.sum(x))
        with pytest.raises(GraphError, match="missing param"):
            forward_eval(g, {})
        with pytest.raises(GraphError, match="expected shape"):
            forward_eval(g, {"x": np.zeros(3)})

    def test_conv_shape_mismatch_rejected_at_build(self):
        g = Graph(dtype=np.float64)
        x = g.param("x", (2, 4, 4))
        w = g.param("w", (3, 1, 3, 3))
        with pytest.raises(GraphError, match="channel mismatch"):
            g.conv2d(x, w)

    def test_backward_requires_scalar_output(self):
        g = Graph(dtype=np.float64)
        x = g.param("x", (2, 2))
        g.set_output(g.square(x))
        with pytest.raises(GraphError, match="scalar"):
            backward_grad(g, {"x": np.ones((2, 2))})


class TestAnalyticGradients:
    def test_sum_of_squares_grad(self):
        g = Graph(dtype=np.float64)
        x = g.param("x", (4,))
        g.set_output(g.sum(g.square(x)))
        xv = np.array([1.0, -2.0, 3.0, 0.5])
        _, grads, _ = backward_grad(g, {"x": xv})
        np.testing.assert_allclose(grads["x"], 2 * xv, rtol=1e-12)

    def test_mean_grad(self):
        g = Graph(dtype=np.float64)
        x = g.param("x", (3, 5))
        g.set_output(g.mean(x))
        _, grads, _ = backward_grad(g, {"x": np.ones((3, 5))})
        np.testing.assert_allclose(grads["x"], 1.0 / 15.0, rtol=1e-12)

    def test_determinism_bitwise(self):
        g, params = scalar_graph(lambda g, x: g.sum(g.exp(x)), (4, 4), seed=3)
        _, g1, _ = backward_grad(g, params)
        _, g2, _ = backward_grad(g, params)
        assert np.array_equal(g1["p0"], g2["p0"])

    def test_chain_rule_composition(self):
        # d/dx square(exp(x)) = 2 exp(x) * exp(x)
        g = Graph(dtype=np.float64)
        x = g.param("x", ())
        g.set_output(g.sum(g.square(g.exp(x))))
        for v in [0.3, -1.2, 0.0, 2.0]:
            _, grads, _ = backward_grad(g, {"x": np.asarray(v)})
            assert abs(float(grads["x"]) - 2 * math.exp(v) * math.exp(v)) < 1e-10


NUM_INSTANCES = 20


class TestFiniteDifferences:
    """Every differentiable operator vs central differences (h=1e-4)."""

    def _run(self, build, *shapes, low=-1.0, high=1.0):
        for seed in range(NUM_INSTANCES):
            g, params = scalar_graph(build, *shapes, seed=seed, low=low, high=high)
            fd_check(g, params)

    def test_add(self):
        self._run(lambda g, a, b: g.sum(g.add(a, b)), (3, 3), (3, 3))

    def test_add_broadcast(self):
        self._run(lambda g, a, b: g.sum(g.square(g.add(a, b))), (2, 3, 3), (1, 3, 3))

    def test_sub(self):
        self._run(lambda g, a, b: g.sum(g.square(g.sub(a, b))), (4,), (4,))

    def test_mul(self):
        self._run(lambda g, a, b: g.sum(g.mul(a, b)), (3, 2), (3, 2))

    def test_mul_scalar_broadcast(self):
        self._run(lambda g, a, b: g.sum(g.mul(a, b)), (2, 4, 4), (1, 1, 1))

    def test_square(self):
        self._run(lambda g, a: g.sum(g.square(a)), (5,))

    def test_sqrt_clamped(self):
        self._run(lambda g, a: g.sum(g.sqrt_clamped(a)), (4, 4), low=0.5, high=2.0)

    def test_abs(self):
        # keep values away from the kink at zero
        self._run(lambda g, a: g.sum(g.abs(a)), (4, 4), low=0.2, high=1.0)
        self._run(lambda g, a: g.sum(g.abs(a)), (4, 4), low=-1.0, high=-0.2)

    def test_exp(self):
        self._run(lambda g, a: g.sum(g.exp(a)), (3, 3))

    def test_log(self):
        self._run(lambda g, a: g.sum(g.log(a)), (3, 3), low=0.5, high=3.0)

    def test_max_min(self):
        # ties have measure zero under continuous sampling
        self._run(lambda g, a, b: g.sum(g.maximum(a, b)), (4, 4), (4, 4))
        self._run(lambda g, a, b: g.sum(g.minimum(a, b)), (4, 4), (4, 4))

    def test_scale_shift(self):
        self._run(lambda g, a: g.sum(g.scale(g.shift(a, 0.7), -1.3)), (3, 3))

    def test_mean_reduction(self):
        self._run(lambda g, a: g.mean(g.square(a)), (4, 5))

    def test_concat_slice(self):
        def build(g, a, b):
            cat = g.concat([a, b])
            return g.sum(g.square(g.slice_channels(cat, 1, 3)))

        self._run(build, (2, 3, 3), (2, 3, 3))

    @pytest.mark.parametrize("padding", ["valid", "same", "same_reflect"])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d(self, padding, stride):
        def build(g, x, w, b):
            return g.sum(g.square(g.conv2d(x, w, b, stride=stride, padding=padding)))

        for seed in range(6):
            g, params = scalar_graph(build, (2, 5, 5), (2, 2, 3, 3), (2,), seed=seed)
            fd_check(g, params)

    def test_downsample2x(self):
        self._run(lambda g, x: g.sum(g.square(g.downsample2x(x))), (2, 5, 5))
        self._run(lambda g, x: g.sum(g.square(g.downsample2x(x))), (1, 6, 8))

    def test_bilinear_resize(self):
        self._run(lambda g, x: g.sum(g.square(g.bilinear_resize(x, 7, 5))), (2, 4, 4))
        self._run(lambda g, x: g.sum(g.square(g.bilinear_resize(x, 2, 3))), (1, 5, 6))

    def test_causal_context(self):
        self._run(lambda g, x: g.sum(g.square(g.causal_context(x))), (1, 4, 4))

    def test_soft_quantize_noise_mode(self):
        rng = np.random.default_rng(0)
        for seed in range(NUM_INSTANCES):
            g = Graph(dtype=np.float64)
            x = g.param("p0", (3, 3))
            nz = g.input("noise", (3, 3))
            g.set_output(g.sum(g.square(g.soft_quantize(x, "noise", 1.0, noise=nz))))
            params = {"p0": rng.uniform(-1, 1, size=(3, 3))}
            inputs = {"noise": rng.uniform(-0.5, 0.5, size=(3, 3))}
            fd_check(g, params, inputs)

    def test_laplace_rate(self):
        def build(g, z, mu, logb):
            b = g.exp(logb)
            return g.sum(g.laplace_rate(z, mu, b))

        for seed in range(NUM_INSTANCES):
            g, params = scalar_graph(build, (3, 3), (3, 3), (3, 3), seed=seed, low=-1.0, high=1.0)
            fd_check(g, params)


class TestSoftQuantize:
    def test_ste_round_forward_and_passthrough_gradient(self):
        assert soft_quantize(np.array([1.4]), "ste")[0] == 1.0
        g = Graph(dtype=np.float64)
        x = g.param("x", (3,))
        g.set_output(g.sum(g.mul(g.soft_quantize(x, "ste"), g.constant(np.array([2.0, 3.0, 4.0])))))
        _, grads, _ = backward_grad(g, {"x": np.array([1.4, -0.2, 0.8])})
        np.testing.assert_allclose(grads["x"], [2.0, 3.0, 4.0])

    def test_noise_mode_deterministic_with_seed(self):
        from wdcodec.imgsig import uniform_field

        x = np.linspace(-2, 2, 16).reshape(4, 4)
        n1 = uniform_field(7, 4, 4, 1).data[0]
        n2 = uniform_field(7, 4, 4, 1).data[0]
        assert np.array_equal(soft_quantize(x, "noise", 1.0, n1), soft_quantize(x, "noise", 1.0, n2))

    def test_noise_bounded(self):
        from wdcodec.imgsig import uniform_field

        x = np.zeros((8, 8))
        n = uniform_field(3, 8, 8, 1).data[0]
        out = soft_quantize(x, "noise", 1.0, n)
        assert np.all(np.abs(out - x) < 0.5)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            soft_quantize(np.zeros(3), "dither")


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        ps = ParamSet()
        ps.add("w", np.array([1.0, -2.0]))
        st = AdamState()
        adam_step(ps, {"w": np.zeros(2)}, st, lr=0.1)
        np.testing.assert_allclose(ps.tensors["w"], [1.0, -2.0])

    def test_descent_direction(self):
        ps = ParamSet()
        ps.add("w", np.array([0.0]))
        st = AdamState()
        for _ in range(50):
            adam_step(ps, {"w": np.array([1.0])}, st, lr=0.01)
        assert ps.tensors["w"][0] < -0.2

    def test_first_step_closed_form(self):
        # first update is -lr * g / (|g| + eps) for any g
        ps = ParamSet()
        ps.add("w", np.array([5.0]))
        st = AdamState()
        adam_step(ps, {"w": np.array([1.0])}, st, lr=0.1, eps=1e-8)
        np.testing.assert_allclose(ps.tensors["w"][0], 5.0 - 0.1 * 1.0 / (1.0 + 1e-8), rtol=1e-12)

    def test_nan_gradient_names_parameter(self):
        ps = ParamSet()
        ps.add("latent.3", np.zeros(2))
        with pytest.raises(FloatingPointError, match="latent.3"):
            adam_step(ps, {"latent.3": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)

    def test_lr_scale_respected(self):
        ps = ParamSet()
        ps.add("a", np.array([0.0]), lr_scale=1.0)
        ps.add("b", np.array([0.0]), lr_scale=0.5)
        st = AdamState()
        adam_step(ps, {"a": np.array([1.0]), "b": np.array([1.0])}, st, lr=0.1)
        assert abs(ps.tensors["a"][0]) > abs(ps.tensors["b"][0])

    def test_duplicate_param_rejected(self):
        ps = ParamSet()
        ps.add("x", np.zeros(1))
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("x", np.zeros(1))
