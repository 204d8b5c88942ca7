import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flametomo import autodiff as ad
from flametomo.autodiff import (
    ParamVector,
    PrimitiveDomainError,
    TapeObjective,
    Var,
    check_gradient,
    evaluate_with_gradient,
    grad,
)
from oracles import central_difference

UNARY = {
    "exp": (ad.exp, lambda x: x),
    "log": (ad.log, lambda x: np.abs(x) + 0.5),
    "sqrt": (ad.sqrt, lambda x: np.abs(x) + 0.5),
    "sigmoid": (ad.sigmoid, lambda x: x),
    "softplus": (ad.softplus, lambda x: x),
    "sin": (ad.sin, lambda x: x),
    "cos": (ad.cos, lambda x: x),
    "square": (ad.square, lambda x: x),
    "cube": (lambda v: ad.power(v, 3.0), lambda x: x),
    "abs": (ad.absolute, lambda x: x + np.sign(x) * 0.1),
}


def fd_check(fn, x, tol=1e-7):
    obj = TapeObjective(fn)
    _, g = obj.value_and_grad(x)
    fd = central_difference(obj.value, x, range(len(x)), rel_eps=1e-6)
    np.testing.assert_allclose(g, fd, rtol=tol, atol=tol * max(1.0, np.abs(fd).max()))


class TestClosedForms:
    def test_square(self):
        v, g = evaluate_with_gradient(lambda t: t[0] ** 2, np.array([3.0]))
        assert v == 9.0 and list(g) == [6.0]

    def test_exp_product(self):
        v, g = evaluate_with_gradient(lambda t: ad.exp(-t[0] * t[1]), np.array([1.0, 2.0]))
        e = np.exp(-2.0)
        assert v == pytest.approx(e, rel=1e-15)
        np.testing.assert_allclose(g, [-2 * e, -e], rtol=1e-15)

    def test_param_vector_input(self):
        p = ParamVector(np.array([1.0, 2.0, 3.0]), {"a": slice(0, 1), "b": slice(1, 3)})
        _, g = evaluate_with_gradient(lambda t: (t * t).sum(), p)
        np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


class TestPrimitives:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_against_differences(self, name):
        fn, domain = UNARY[name]
        x = domain(np.random.default_rng(1).normal(size=6))
        fd_check(lambda t: fn(t).sum() * 1.0, x)

    def test_broadcast_arithmetic(self):
        x = np.random.default_rng(2).normal(size=7) + 3.0
        fd_check(lambda t: ((t[:3].reshape(3, 1) * t[3:].reshape(1, 4)) / (t[0] + 5.0) - t[1:4].reshape(3, 1)).sum(), x)

    def test_matmul_sum_mean(self):
        x = np.random.default_rng(3).normal(size=12)
        fd_check(lambda t: (t[:6].reshape(2, 3) @ t[6:].reshape(3, 2)).mean(axis=0).sum(), x)

    def test_getitem_take_concat(self):
        x = np.random.default_rng(4).normal(size=8)
        idx = np.array([0, 3, 3, 7])
        fd_check(lambda t: ad.square(ad.concatenate([ad.take_rows(t, idx), t[2:5]], axis=0)).sum(), x)

    def test_transpose_reshape(self):
        x = np.random.default_rng(5).normal(size=6)
        w = np.arange(6.0).reshape(3, 2)
        fd_check(lambda t: (t.reshape(2, 3).T * w).sum(), x)

    def test_linear_operator_adjoint(self):
        rng = np.random.default_rng(6)
        M = rng.normal(size=(4, 9))
        a, y = rng.normal(size=(3, 9)), rng.normal(size=(3, 4))
        out = ad.linear_operator(Var(a, requires_grad=True), M)
        # <M a, y> == <a, M^T y>
        (ga,) = grad(out, [out.parents[0]], seed=y)
        assert np.sum(out.value * y) == pytest.approx(np.sum(a * ga), rel=1e-13)

    @pytest.mark.parametrize("fn,x", [
        (ad.log, -1.0),
        (ad.sqrt, -4.0),
        (lambda v: ad.div(1.0, v), 0.0),
        (lambda v: ad.power(v, 0.5), -2.0),
        (ad.exp, 1e6),
    ])
    def test_domain_errors_name_primitive(self, fn, x):
        with pytest.raises(PrimitiveDomainError) as info:
            fn(Var(np.array([x]), requires_grad=True))
        assert info.value.primitive in str(info.value)

    def test_nonscalar_needs_seed(self):
        v = Var(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            grad(v * 2.0, [v])

    def test_unused_input_zero_gradient(self):
        a, b = Var(np.ones(2), requires_grad=True), Var(np.ones(3), requires_grad=True)
        ga, gb = grad((a * 3.0).sum(), [a, b])
        np.testing.assert_array_equal(ga, 3.0)
        np.testing.assert_array_equal(gb, 0.0)


def random_tree(draw_ops, depth=3):
    """Build a random scalar expression from a list of op codes."""
    def build(t, ops):
        acc = t
        for code in ops:
            if code == 0:
                acc = acc * t + 0.5
            elif code == 1:
                acc = ad.sin(acc)
            elif code == 2:
                acc = ad.softplus(acc) - t
            elif code == 3:
                acc = ad.exp(-ad.square(acc))
            else:
                acc = acc / (1.0 + ad.square(t))
        return acc.sum()
    return lambda t: build(t, draw_ops)


class TestProperties:
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=6), st.lists(st.integers(0, 4), min_size=1, max_size=6),
           st.integers(0, 2**31))
    def test_gradient_of_sum_is_sum_of_gradients(self, ops_f, ops_g, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, 4)
        f, g = random_tree(ops_f), random_tree(ops_g)
        _, gf = evaluate_with_gradient(f, x)
        _, gg = evaluate_with_gradient(g, x)
        _, gs = evaluate_with_gradient(lambda t: f(t) + g(t), x)
        np.testing.assert_allclose(gs, gf + gg, rtol=1e-12, atol=1e-14)

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=6), st.integers(0, 2**31))
    def test_reverse_pass_leaves_value_intact(self, ops, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, 4)
        obj = TapeObjective(random_tree(ops))
        v1, _ = obj.value_and_grad(x)
        assert obj.value(x) == v1

    def test_bit_identical_repeat(self):
        x = np.random.default_rng(9).normal(size=5)
        f = random_tree([0, 1, 2, 3, 4])
        a = evaluate_with_gradient(f, x)[1]
        b = evaluate_with_gradient(f, x)[1]
        assert a.tobytes() == b.tobytes()


class TestCheckGradient:
    def test_linear(self):
        w = np.array([1.5, -2.0, 0.25])
        assert check_gradient(lambda t: (t * w).sum(), np.array([0.3, 4.0, -7.0]), [0, 1, 2]) < 1e-10

    def test_quadratic(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert check_gradient(lambda t: (t * (t @ A)).sum(), np.array([1.0, -3.0]), [0, 1]) < 1e-10

    def test_detects_wrong_gradient(self):
        class Wrong:
            def value_and_grad(self, x):
                return float(np.sum(x**2)), 3 * x

        assert check_gradient(Wrong(), np.array([1.0, 2.0]), [0, 1]) > 0.1

    def test_eps_range(self):
        with pytest.raises(ValueError):
            check_gradient(lambda t: t.sum(), np.ones(2), [0], eps=0.1)


class TestParamVector:
    def test_default_layout(self):
        assert ParamVector(np.zeros(4)).layout == {"all": slice(0, 4)}

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(4), {"a": slice(0, 3), "b": slice(2, 4)})

    def test_gap_rejected(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(4), {"a": slice(0, 1), "b": slice(2, 4)})

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            ParamVector(np.array([0.0, np.inf]))

    def test_slice_lookup(self):
        p = ParamVector(np.zeros(5), {"T": slice(0, 2), "X": slice(2, 5)})
        assert p.slice_of(1) == "T" and p.slice_of(4) == "X"
        assert p.block("X").shape == (3,)
