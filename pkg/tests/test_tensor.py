import numpy as np
import pytest

from unsq import tensor as T
from unsq.tensor import Tape, Tensor, backward, elementwise, grad_check, reduce


def t4(values):
    return Tensor(np.asarray(values, dtype=float).reshape(1, 1, 1, -1))


class TestElementwise:
    def test_add(self):
        out = elementwise("add", t4([1, 2]), t4([3, 4]))
        np.testing.assert_array_equal(out.data.ravel(), [4, 6])

    def test_scalar_mul_identity(self):
        x = t4([0.3, -1.7, 2.0])
        np.testing.assert_array_equal(elementwise("scalar-mul", x, 1.0).data, x.data)

    def test_exp_log_inverse(self):
        x = t4([0.5, 2.0])
        back = elementwise("exp", elementwise("log", x))
        np.testing.assert_allclose(back.data, x.data, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("kind,expected", [
        ("sub", [-2, -2]), ("mul", [3, 8]), ("scalar-add", [3.5, 4.5]),
    ])
    def test_other_kinds(self, kind, expected):
        b = 2.5 if kind.startswith("scalar") else t4([3, 4])
        out = elementwise(kind, t4([1, 2]), b)
        np.testing.assert_allclose(out.data.ravel(), expected)

    def test_negate(self):
        np.testing.assert_array_equal(elementwise("negate", t4([1, -2])).data.ravel(), [-1, 2])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            elementwise("add", t4([1, 2]), t4([1, 2, 3]))

    def test_log_nonpositive_names_index(self):
        with pytest.raises(ValueError, match="index 2"):
            elementwise("log", t4([1.0, 0.5, 0.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise("pow", t4([1.0]))

    def test_construction_rejects_nan(self):
        with pytest.raises(T.NonFiniteError):
            Tensor([1.0, np.nan])


class TestReduce:
    def test_sum(self):
        assert reduce("sum", t4([1, 2, 3, 4])).item() == 10

    def test_mean(self):
        assert reduce("mean", t4([1, 2, 3, 4])).item() == 2.5

    def test_sum_zeros(self):
        out = reduce("sum", Tensor(np.zeros((2, 3, 4, 5))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 0

    def test_sum_is_reproducible(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 5, 6))
        a = reduce("sum", Tensor(x)).item()
        b = reduce("sum", Tensor(x.copy())).item()
        assert a == b


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        with Tape() as tape:
            loss = reduce("sum", x)
        np.testing.assert_array_equal(backward(tape, loss)[x].data, np.ones((1, 1, 2, 2)))

    def test_square(self):
        x = t4([3.0])
        x.requires_grad = True
        with Tape() as tape:
            loss = reduce("sum", elementwise("mul", x, x))
        assert backward(tape, loss)[x].item() == 6.0

    def test_mean_gradient(self):
        x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = reduce("mean", x)
        np.testing.assert_array_equal(backward(tape, loss)[x].data, np.full((1, 2, 2, 2), 0.125))

    def test_accumulation_over_reuse(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = reduce("sum", x + x)
        np.testing.assert_array_equal(backward(tape, loss)[x].data, 2 * np.ones((1, 1, 3, 3)))

    def test_grads_accumulate_across_calls_until_zeroed(self):
        x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = reduce("sum", x)
            backward(tape, loss)
        np.testing.assert_array_equal(x.grad, 2 * np.ones((1, 1, 1, 2)))
        x.zero_grad()
        assert x.grad is None

    def test_unreached_leaf_gets_zeros(self):
        x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        unused = Tensor(np.ones((1, 1, 1, 3)), requires_grad=True)
        with Tape() as tape:
            tape.watch(unused)
            loss = reduce("sum", x)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[unused].data, np.zeros((1, 1, 1, 3)))

    def test_non_scalar_loss(self):
        x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ValueError, match="scalar"):
            backward(tape, y)

    def test_loss_from_other_tape(self):
        x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        with Tape():
            loss = reduce("sum", x)
        with pytest.raises(ValueError, match="not recorded"):
            backward(Tape(), loss)

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        y = reduce("sum", x)
        assert not y.requires_grad

    def test_leaves_are_in_first_use_order(self):
        a = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        b = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        with Tape() as tape:
            reduce("sum", b * a)
        assert tape.leaves == [b, a]


class TestGradCheck:
    def test_linear_exact(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        rep = grad_check(lambda t: reduce("sum", t), x)
        assert rep.passed and rep.max_relative_error < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_sum_exp(self, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, size=(1, 1, 4, 4))
        rep = grad_check(lambda t: reduce("sum", elementwise("exp", t)), x, 1e-5, 1e-4)
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", range(5))
    def test_composite(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.5, 2.0, size=(2, 1, 2, 3))
        c = Tensor(rng.normal(size=x.shape))

        def f(t):
            return reduce("mean", elementwise("log", t) * c - t * t + elementwise("exp", -t))

        assert grad_check(f, x).passed

    def test_nan_region_is_error(self):
        # log of a non-positive perturbed coordinate must raise, not pass
        x = np.full((1, 1, 1, 2), 5e-6)
        with pytest.raises(ValueError):
            grad_check(lambda t: reduce("sum", elementwise("log", t)), x, epsilon=1e-5)

    def test_nonfinite_value_is_error(self):
        x = np.array([[[[800.0]]]])
        with pytest.raises(T.NonFiniteError):
            grad_check(lambda t: reduce("sum", elementwise("exp", t)), x)

    def test_non_scalar_function(self):
        with pytest.raises(ValueError, match="scalar"):
            grad_check(lambda t: t * 2.0, np.ones((1, 1, 1, 2)))

    def test_detects_wrong_gradient(self):
        def bad_square(t):
            return T.record("bad", (t,), t.data ** 2, lambda g: (g * t.data,))

        rep = grad_check(lambda t: reduce("sum", bad_square(t)), np.ones((1, 1, 1, 3)))
        assert not rep.passed


def test_check_finite_toggle(monkeypatch):
    monkeypatch.setenv("UNSQ_CHECK_FINITE", "1")
    x = Tensor(np.array([[[[1000.0]]]]))
    with pytest.raises(T.NonFiniteError, match="exp"):
        elementwise("exp", x)
    monkeypatch.setenv("UNSQ_CHECK_FINITE", "0")
    assert np.isinf(elementwise("exp", x).item())


def test_determinism():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 4, 4)))
        with Tape() as tape:
            loss = reduce("mean", elementwise("exp", x) * w)
        return loss.item(), backward(tape, loss)[x].data

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert np.array_equal(g1, g2)
