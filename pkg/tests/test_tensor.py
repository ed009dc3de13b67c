"""Unit tests for the tensor/graph autodiff core."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saliency_audit.tensor import (
    Graph,
    GraphError,
    Tensor,
    finite_diff_grad,
    forward,
    forward_trace,
    grad,
    lse_pool,
)


def scalar_graph():
    g = Graph()
    x = g.leaf("x", ())
    return g, x


class TestForwardBasics:
    def test_linear_scaling(self):
        g, x = scalar_graph()
        g.output("y", g.scale(x, 3.0))
        out = forward(g, {"x": Tensor(2.0)})
        assert out["y"].item() == 6.0

    def test_relu_negative_branch(self):
        g, x = scalar_graph()
        g.output("y", g.relu(x))
        assert forward(g, {"x": Tensor(-1.5)})["y"].item() == 0.0

    def test_softplus_at_zero(self):
        g, x = scalar_graph()
        g.output("y", g.softplus(x, beta=1.0))
        assert forward(g, {"x": Tensor(0.0)})["y"].item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_unbound_leaf_errors(self):
        g, x = scalar_graph()
        g.output("y", g.relu(x))
        with pytest.raises(GraphError, match="x"):
            forward(g, {})

    def test_binding_shape_mismatch_names_node(self):
        g = Graph()
        x = g.leaf("x", (2,))
        g.output("y", g.relu(x))
        with pytest.raises(GraphError, match="x"):
            forward(g, {"x": Tensor([1.0, 2.0, 3.0])})

    def test_build_time_shape_mismatch(self):
        g = Graph()
        a = g.leaf("a", (2, 3))
        b = g.leaf("b", (4, 2))
        with pytest.raises(GraphError):
            g.matmul(a, b)

    def test_forward_prunes_unrequested_outputs(self):
        g = Graph()
        x = g.leaf("x", ())
        t = g.leaf("unused", ())
        g.output("y", g.scale(x, 2.0))
        g.output("z", g.add(x, t))
        out = forward(g, {"x": Tensor(1.0)}, outputs=["y"])
        assert out["y"].item() == 2.0


class TestGradBasics:
    def test_power_rule_via_mul(self):
        g, x = scalar_graph()
        g.output("y", g.mul(x, x))
        d = grad(g, {"x": Tensor(3.0)}, wrt=["x"])
        assert d["x"].item() == pytest.approx(6.0, abs=1e-12)

    def test_linear_gradient_is_weight(self):
        g = Graph()
        w = g.leaf("w", (2,))
        x = g.leaf("x", (2,))
        g.output("y", g.matmul(w, x))
        d = grad(g, {"w": Tensor([1.0, 2.0]), "x": Tensor([5.0, 7.0])}, wrt=["x"])
        np.testing.assert_allclose(d["x"].array, [1.0, 2.0], atol=1e-12)

    def test_softplus_gradient_at_zero(self):
        g, x = scalar_graph()
        g.output("y", g.softplus(x, beta=1.0))
        d = grad(g, {"x": Tensor(0.0)}, wrt=["x"])
        assert d["x"].item() == pytest.approx(0.5, abs=1e-12)

    def test_nonscalar_output_needs_index(self):
        g = Graph()
        x = g.leaf("x", (3,))
        g.output("y", g.relu(x))
        with pytest.raises(GraphError, match="index"):
            grad(g, {"x": Tensor([1.0, 2.0, 3.0])}, wrt=["x"])

    def test_unknown_leaf_errors(self):
        g, x = scalar_graph()
        g.output("y", g.relu(x))
        with pytest.raises(GraphError, match="nope"):
            grad(g, {"x": Tensor(1.0)}, wrt=["nope"])

    def test_index_selects_logit(self):
        g = Graph()
        x = g.leaf("x", (3,))
        g.output("y", g.mul(x, x))
        d = grad(g, {"x": Tensor([1.0, 2.0, 3.0])}, wrt=["x"], index=1)
        np.testing.assert_allclose(d["x"].array, [0.0, 4.0, 0.0], atol=1e-12)


class TestFiniteDiff:
    def test_quadratic(self):
        f = lambda t: float(t.array**2)
        fd = finite_diff_grad(f, Tensor(3.0), eps=1e-5)
        assert fd.item() == pytest.approx(6.0, abs=1e-8)

    def test_linear_exact(self):
        w = np.array([2.0, -3.0, 0.5])
        f = lambda t: float(w @ t.array)
        fd = finite_diff_grad(f, Tensor([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(fd.array, w, atol=1e-9)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: 0.0, Tensor(1.0), eps=0.0)

    def test_random_mlp_matches_grad(self):
        rng = np.random.default_rng(7)
        g = Graph()
        x = g.leaf("x", (6,))
        h = g.reshape(x, (1, 6))
        for i, (m, n) in enumerate([(6, 5), (5, 4), (4, 1)]):
            w = g.const(rng.normal(size=(m, n)) * 0.7, name=f"w{i}")
            b = g.const(rng.normal(size=(n,)) * 0.1, name=f"b{i}")
            h = g.add(g.matmul(h, w), b)
            if i < 2:
                h = g.tanh(h)
        g.output("y", g.reshape(h, ()))
        x0 = Tensor(rng.normal(size=(6,)))
        exact = grad(g, {"x": x0}, wrt=["x"])["x"].array
        fd = finite_diff_grad(lambda t: forward(g, {"x": t})["y"].item(), x0).array
        np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-9)


class TestLsePool:
    def test_two_values(self):
        # direct closed form: 10 + log1p(exp(-10)) scaled by 1/10
        expected = (10.0 + math.log1p(math.exp(-10.0))) / 10.0
        assert lse_pool([1.0, 0.0], t=10.0) == pytest.approx(expected, abs=1e-12)

    def test_equal_values(self):
        assert lse_pool([0.0, 0.0, 0.0, 0.0], t=10.0) == pytest.approx(math.log(4) / 10.0, abs=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(GraphError):
            lse_pool([1.0], t=0.0)

    def test_overflow_safe(self):
        assert math.isfinite(lse_pool([1e4, -1e4], t=50.0))

    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=9),
        st.floats(0.1, 60.0),
    )
    def test_exceeds_max(self, vals, t):
        assert lse_pool(vals, t) >= max(vals) - 1e-12

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
    def test_approaches_max(self, vals):
        assert lse_pool(vals, t=1e4) == pytest.approx(max(vals), abs=1e-3)


class TestActivationBounds:
    @given(st.floats(-60, 60), st.floats(0.5, 80.0))
    def test_softplus_sandwich(self, x, beta):
        g = Graph()
        xn = g.leaf("x", ())
        g.output("sp", g.softplus(xn, beta=beta))
        g.output("re", g.relu(xn))
        out = forward(g, {"x": Tensor(x)})
        sp, re = out["sp"].item(), out["re"].item()
        assert sp >= re - 1e-12
        assert re >= sp - math.log(2) / beta - 1e-12


class TestDeterminismAndLinearity:
    def test_bitwise_deterministic(self):
        rng = np.random.default_rng(3)
        g = Graph()
        x = g.leaf("x", (4, 4))
        w = g.leaf("w", (4, 4))
        y = g.softmax(g.matmul(g.tanh(x), w), axis=-1)
        g.output("y", g.sum(y))
        bind = {"x": Tensor(rng.normal(size=(4, 4))), "w": Tensor(rng.normal(size=(4, 4)))}
        a = forward(g, bind)["y"].array
        b = forward(g, bind)["y"].array
        assert a.tobytes() == b.tobytes()
        ga = grad(g, bind, wrt=["x", "w"])
        gb = grad(g, bind, wrt=["x", "w"])
        assert ga["x"].array.tobytes() == gb["x"].array.tobytes()
        assert ga["w"].array.tobytes() == gb["w"].array.tobytes()

    def test_reverse_mode_linearity(self):
        rng = np.random.default_rng(11)
        a, b = 2.5, -1.25

        def build(alpha, beta):
            g = Graph()
            x = g.leaf("x", (5,))
            f = g.sum(g.tanh(x))
            h = g.sum(g.mul(x, x))
            g.output("y", g.add(g.scale(f, alpha), g.scale(h, beta)))
            return g

        x0 = Tensor(rng.normal(size=(5,)))
        gf = grad(build(1.0, 0.0), {"x": x0}, wrt=["x"])["x"].array
        gh = grad(build(0.0, 1.0), {"x": x0}, wrt=["x"])["x"].array
        gmix = grad(build(a, b), {"x": x0}, wrt=["x"])["x"].array
        np.testing.assert_allclose(gmix, a * gf + b * gh, atol=1e-12)


def _randn(rng, shape, scale=0.8):
    return Tensor(rng.normal(size=shape) * scale)


class TestOperatorGradChecks:
    """Each operator against central finite differences."""

    CASES = {}

    def check(self, build, bindings, rel=1e-6, atol=1e-9):
        g, out_name = build
        for leaf in bindings:
            exact = grad(g, bindings, wrt=[leaf], output=out_name)[leaf].array

            def f(t, leaf=leaf):
                bound = dict(bindings)
                bound[leaf] = t
                return forward(g, bound, outputs=[out_name])[out_name].item()

            fd = finite_diff_grad(f, bindings[leaf]).array
            np.testing.assert_allclose(exact, fd, rtol=rel, atol=atol, err_msg=f"leaf {leaf}")

    def test_add_broadcast(self):
        rng = np.random.default_rng(0)
        g = Graph()
        a = g.leaf("a", (3, 4))
        b = g.leaf("b", (4,))
        g.output("y", g.sum(g.tanh(g.add(a, b))))
        self.check((g, "y"), {"a": _randn(rng, (3, 4)), "b": _randn(rng, (4,))})

    def test_sub_mul(self):
        rng = np.random.default_rng(1)
        g = Graph()
        a = g.leaf("a", (2, 3))
        b = g.leaf("b", (2, 3))
        g.output("y", g.sum(g.mul(g.sub(a, b), a)))
        self.check((g, "y"), {"a": _randn(rng, (2, 3)), "b": _randn(rng, (2, 3))})

    def test_matmul_2d(self):
        rng = np.random.default_rng(2)
        g = Graph()
        a = g.leaf("a", (3, 4))
        b = g.leaf("b", (4, 2))
        g.output("y", g.sum(g.matmul(a, b)))
        self.check((g, "y"), {"a": _randn(rng, (3, 4)), "b": _randn(rng, (4, 2))})

    def test_matmul_batched(self):
        rng = np.random.default_rng(3)
        g = Graph()
        a = g.leaf("a", (2, 3, 4))
        b = g.leaf("b", (2, 4, 3))
        g.output("y", g.sum(g.tanh(g.matmul(a, b))))
        self.check((g, "y"), {"a": _randn(rng, (2, 3, 4)), "b": _randn(rng, (2, 4, 3))})

    def test_matmul_vector_cases(self):
        rng = np.random.default_rng(4)
        g = Graph()
        a = g.leaf("a", (4,))
        m = g.leaf("m", (4, 3))
        v = g.leaf("v", (3,))
        g.output("y", g.matmul(g.matmul(a, m), v))
        self.check((g, "y"), {"a": _randn(rng, (4,)), "m": _randn(rng, (4, 3)), "v": _randn(rng, (3,))})

    def test_conv2d(self):
        rng = np.random.default_rng(5)
        g = Graph()
        x = g.leaf("x", (2, 6, 6))
        w = g.leaf("w", (3, 2, 3, 3))
        g.output("y", g.sum(g.tanh(g.conv2d(x, w, stride=1, padding=1))))
        self.check((g, "y"), {"x": _randn(rng, (2, 6, 6)), "w": _randn(rng, (3, 2, 3, 3))})

    def test_conv2d_stride2(self):
        rng = np.random.default_rng(6)
        g = Graph()
        x = g.leaf("x", (1, 7, 7))
        w = g.leaf("w", (2, 1, 3, 3))
        g.output("y", g.sum(g.conv2d(x, w, stride=2, padding=0)))
        self.check((g, "y"), {"x": _randn(rng, (1, 7, 7)), "w": _randn(rng, (2, 1, 3, 3))})

    def test_maxpool(self):
        rng = np.random.default_rng(7)
        g = Graph()
        x = g.leaf("x", (2, 4, 4))
        g.output("y", g.sum(g.maxpool2d(x, 2)))
        # keep values well separated so the finite difference avoids kinks
        vals = rng.permutation(np.arange(32, dtype=float)).reshape(2, 4, 4) * 0.1
        self.check((g, "y"), {"x": Tensor(vals)})

    def test_maxpool_tie_routes_first_rowmajor(self):
        g = Graph()
        x = g.leaf("x", (1, 2, 2))
        g.output("y", g.sum(g.maxpool2d(x, 2)))
        d = grad(g, {"x": Tensor([[[1.0, 1.0], [1.0, 1.0]]])}, wrt=["x"])
        np.testing.assert_array_equal(d["x"].array, [[[1.0, 0.0], [0.0, 0.0]]])

    def test_lsepool(self):
        rng = np.random.default_rng(8)
        g = Graph()
        x = g.leaf("x", (2, 4, 4))
        g.output("y", g.sum(g.lsepool2d(x, 2, t=7.0)))
        self.check((g, "y"), {"x": _randn(rng, (2, 4, 4))})

    def test_lsepool_forward_matches_helper(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 4, 4))
        g = Graph()
        xn = g.leaf("x", (1, 4, 4))
        g.output("y", g.lsepool2d(xn, 2, t=3.0))
        out = forward(g, {"x": Tensor(x)})["y"].array
        for i in range(2):
            for j in range(2):
                window = x[0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                assert out[0, i, j] == pytest.approx(lse_pool(window, 3.0), abs=1e-12)

    def test_softplus_beta(self):
        rng = np.random.default_rng(10)
        g = Graph()
        x = g.leaf("x", (5,))
        g.output("y", g.sum(g.softplus(x, beta=4.0)))
        self.check((g, "y"), {"x": _randn(rng, (5,))})

    def test_exp_log(self):
        rng = np.random.default_rng(11)
        g = Graph()
        x = g.leaf("x", (4,))
        g.output("y", g.sum(g.log(g.exp(x))))
        self.check((g, "y"), {"x": _randn(rng, (4,))})

    def test_mean_axes(self):
        rng = np.random.default_rng(12)
        g = Graph()
        x = g.leaf("x", (3, 4, 2))
        g.output("y", g.sum(g.mul(g.mean(x, axes=(0, 2)), g.mean(x, axes=(0, 2)))))
        self.check((g, "y"), {"x": _randn(rng, (3, 4, 2))})

    def test_sum_keepdims(self):
        rng = np.random.default_rng(13)
        g = Graph()
        x = g.leaf("x", (3, 4))
        g.output("y", g.sum(g.mul(x, g.sum(x, axes=1, keepdims=True))))
        self.check((g, "y"), {"x": _randn(rng, (3, 4))})

    def test_softmax(self):
        rng = np.random.default_rng(14)
        g = Graph()
        x = g.leaf("x", (2, 5)); w = g.leaf("w", (2, 5))
        g.output("y", g.sum(g.mul(g.softmax(x, axis=-1), w)))
        self.check((g, "y"), {"x": _randn(rng, (2, 5)), "w": _randn(rng, (2, 5))})

    def test_layer_norm(self):
        rng = np.random.default_rng(15)
        g = Graph()
        x = g.leaf("x", (3, 6))
        gain = g.leaf("gain", (6,))
        bias = g.leaf("bias", (6,))
        g.output("y", g.sum(g.tanh(g.layer_norm(x, gain, bias))))
        self.check(
            (g, "y"),
            {"x": _randn(rng, (3, 6)), "gain": Tensor(rng.normal(size=6) * 0.3 + 1.0), "bias": _randn(rng, (6,))},
            rel=2e-6,
        )

    def test_gather_rows(self):
        rng = np.random.default_rng(16)
        g = Graph()
        table = g.leaf("table", (7, 3))
        ids = g.leaf("ids", (4,))
        g.output("y", g.sum(g.tanh(g.gather_rows(table, ids))))
        bindings = {"table": _randn(rng, (7, 3)), "ids": Tensor([0.0, 3.0, 3.0, 6.0])}
        exact = grad(g, bindings, wrt=["table"])["table"].array
        fd = finite_diff_grad(
            lambda t: forward(g, {"table": t, "ids": bindings["ids"]})["y"].item(),
            bindings["table"],
        ).array
        np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-9)

    def test_gather_out_of_range(self):
        g = Graph()
        table = g.leaf("table", (3, 2))
        ids = g.leaf("ids", (1,))
        g.output("y", g.sum(g.gather_rows(table, ids)))
        with pytest.raises(GraphError, match="range"):
            forward(g, {"table": Tensor.zeros((3, 2)), "ids": Tensor([5.0])})

    def test_cross_entropy(self):
        rng = np.random.default_rng(17)
        g = Graph()
        logits = g.leaf("logits", (5,))
        onehot = g.const([0.0, 0.0, 1.0, 0.0, 0.0])
        g.output("loss", g.cross_entropy(logits, onehot))
        bindings = {"logits": _randn(rng, (5,))}
        exact = grad(g, bindings, wrt=["logits"])["logits"].array
        fd = finite_diff_grad(
            lambda t: forward(g, {"logits": t})["loss"].item(), bindings["logits"]
        ).array
        np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-9)

    def test_concat_reshape_transpose(self):
        rng = np.random.default_rng(18)
        g = Graph()
        a = g.leaf("a", (2, 3))
        b = g.leaf("b", (2, 2))
        cat = g.concat([a, b], axis=1)
        g.output("y", g.sum(g.tanh(g.transpose(g.reshape(cat, (5, 2)), (1, 0)))))
        self.check((g, "y"), {"a": _randn(rng, (2, 3)), "b": _randn(rng, (2, 2))})


class TestGuidedRelu:
    def test_positive_path_equals_plain_gradient(self):
        g = Graph()
        x = g.leaf("x", (2,))
        w = g.const([1.0, 1.0])
        g.output("y", g.relu(g.matmul(w, x)))
        d = grad(g, {"x": Tensor([1.0, 1.0])}, wrt=["x"], guided_relu=True)
        np.testing.assert_allclose(d["x"].array, [1.0, 1.0], atol=1e-12)

    def test_negative_upstream_blocked(self):
        g = Graph()
        x = g.leaf("x", ())
        g.output("y", g.scale(g.relu(x), -1.0))
        d = grad(g, {"x": Tensor(1.0)}, wrt=["x"], guided_relu=True)
        assert d["x"].item() == 0.0

    def test_dead_unit_blocked(self):
        g = Graph()
        x = g.leaf("x", ())
        g.output("y", g.relu(x))
        d = grad(g, {"x": Tensor(-1.0)}, wrt=["x"], guided_relu=True)
        assert d["x"].item() == 0.0


class TestForwardTrace:
    def test_trace_exposes_intermediates(self):
        g = Graph()
        x = g.leaf("x", ())
        h = g.relu(x)
        g.output("y", g.scale(h, 2.0))
        tr = forward_trace(g, {"x": Tensor(3.0)})
        assert tr[h.name].item() == 3.0
        assert tr["x"].item() == 3.0
