import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfka import tensor as T
from dfka.tensor import Rng, ShapeError, NonFiniteError, Tensor


def _param(rng, *shape):
    return T.parameter(rng.normal(size=shape))


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


class TestBroadcast:
    def test_suffix_shape(self):
        assert T.check_broadcast((4, 3, 2), (3, 2)) == (4, 3, 2)
        assert T.check_broadcast((2,), (5, 2)) == (5, 2)

    def test_prefix_with_trailing_ones(self):
        assert T.check_broadcast((4, 3, 2), (4, 1, 1)) == (4, 3, 2)
        assert T.check_broadcast((4, 1), (4, 7)) == (4, 7)

    def test_scalar(self):
        assert T.check_broadcast((3, 2), ()) == (3, 2)

    @pytest.mark.parametrize("a,b", [((4, 3), (4,)), ((2, 3), (3, 2)), ((1, 3), (4, 3))])
    def test_rejected(self, a, b):
        with pytest.raises(ShapeError):
            T.check_broadcast(a, b)

    def test_add_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_unbroadcast_sums_back(self, f64):
        a = T.parameter(np.ones((3,)))
        b = T.parameter(np.ones((2, 3)))
        (a * b).sum().backward()
        np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(b.grad, np.ones((2, 3)))


class TestBackward:
    def test_needs_scalar(self):
        x = T.parameter(np.ones(3))
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_nonfinite_loss(self):
        x = T.parameter(np.array([np.inf]))
        with pytest.raises(NonFiniteError):
            (x * 1.0).sum().backward()

    def test_grads_accumulate(self, f64):
        x = T.parameter(np.array([1.0, 2.0]))
        (x * x).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)
        T.zero_grad([x])
        assert x.grad is None

    def test_shared_node_counted_twice(self, f64):
        x = T.parameter(np.array(3.0))
        y = x * x
        (y + y).backward()
        assert x.grad == pytest.approx(12.0)

    def test_no_grad_builds_no_graph(self):
        x = T.parameter(np.ones(2))
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_python_scalars_keep_dtype(self):
        x = T.parameter(np.ones(3))
        assert (x * 0.5 + 1.0).dtype == np.float32
        with T.precision("float64"):
            assert (T.parameter(np.ones(2)) * 3).dtype == np.float64

    def test_precision_restores(self):
        before = T.get_dtype()
        with T.precision("float64"):
            assert T.get_dtype() == np.float64
        assert T.get_dtype() == before

    def test_bad_dtype(self):
        with pytest.raises(ValueError):
            T.set_dtype(np.int32)


class TestOpGradients:
    """Finite-difference checks for every differentiable op, in float64."""

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary(self, f64, op):
        rng = Rng(1)
        a, b = _param(rng, 3, 4), T.parameter(rng.uniform(0.5, 2.0, size=(4,)))
        fn = lambda: getattr(T, op)(a, b).sum() if op != "div" else T.div(a, b).sum()
        err = T.grad_check(lambda: (getattr(T, op)(a, b) ** 2).sum(), {"a": a, "b": b})
        assert max(err.values()) < 1e-6

    @pytest.mark.parametrize("fn", [T.exp, T.tanh, T.gelu, lambda x: T.log(x * x + 1.0),
                                    lambda x: T.power(x * x + 1.0, 1.5)])
    def test_unary(self, f64, fn):
        x = _param(Rng(2), 5, 3)
        err = T.grad_check(lambda: (fn(x) * T.Tensor(np.arange(15.0).reshape(5, 3))).sum(), {"x": x})
        assert err["x"] < 1e-6

    def test_matmul_2d_and_batched(self, f64):
        rng = Rng(3)
        a, b, c = _param(rng, 2, 3, 4), _param(rng, 4, 5), _param(rng, 2, 5, 2)
        err = T.grad_check(lambda: (T.matmul(T.matmul(a, b), c) ** 2).sum(), {"a": a, "b": b, "c": c})
        assert max(err.values()) < 1e-6

    def test_softmax_log_softmax(self, f64):
        x = _param(Rng(4), 3, 5)
        w = T.Tensor(Rng(5).normal(size=(3, 5)))
        err = T.grad_check(lambda: (T.softmax(x, axis=-1, temperature=0.7) * w).sum()
                           + (T.log_softmax(x, axis=0) * w).sum(), {"x": x})
        assert err["x"] < 1e-6

    def test_softmax_other_axis(self, f64):
        x = _param(Rng(6), 2, 4, 3)
        w = T.Tensor(Rng(7).normal(size=(2, 4, 3)))
        err = T.grad_check(lambda: (T.softmax(x, axis=1) * w).sum(), {"x": x})
        assert err["x"] < 1e-6

    def test_layer_norm(self, f64):
        rng = Rng(8)
        x, g, b = _param(rng, 2, 3, 6), _param(rng, 6), _param(rng, 6)
        w = T.Tensor(rng.normal(size=(2, 3, 6)))
        err = T.grad_check(lambda: (T.layer_norm(x, g, b) * w).sum(), {"x": x, "g": g, "b": b})
        assert max(err.values()) < 1e-5

    def test_shape_ops(self, f64):
        rng = Rng(9)
        x = _param(rng, 2, 3, 4)
        w = T.Tensor(rng.normal(size=(4, 2, 3)))

        def fn():
            y = T.transpose(x, (2, 0, 1))
            z = T.reshape(T.swapaxes(y, 1, 2), (4, 3, 2))
            z = T.swapaxes(z, 1, 2)
            return (z * w).sum() + T.getitem(x, (slice(None), 1)).sum() ** 2

        assert T.grad_check(fn, {"x": x})["x"] < 1e-6

    def test_concat_stack_expand(self, f64):
        rng = Rng(10)
        a, b, e = _param(rng, 2, 3), _param(rng, 2, 1), _param(rng, 3)
        w = T.Tensor(rng.normal(size=(2, 2, 4)))

        def fn():
            c = T.concat([a, b], axis=1)
            s = T.stack([c, c * 2.0], axis=1)
            return (s * w).sum() + (T.expand(e, (5, 3)) ** 2).sum()

        err = T.grad_check(fn, {"a": a, "b": b, "e": e})
        assert max(err.values()) < 1e-6

    def test_embedding_and_masked_mean(self, f64):
        rng = Rng(11)
        emb = _param(rng, 7, 4)
        ids = np.array([[1, 2, 2, 0], [3, 3, 6, 5]])
        mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
        err = T.grad_check(lambda: (T.masked_mean(T.embedding(emb, ids), mask) ** 2).sum(), {"emb": emb})
        assert err["emb"] < 1e-6

    def test_masked_fill_blocks_gradient(self, f64):
        x = T.parameter(np.ones((2, 2)))
        T.masked_fill(x, np.array([[True, False], [False, False]]), -5.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [[0, 1], [1, 1]])

    def test_cross_entropy(self, f64):
        x = _param(Rng(12), 4, 3)
        err = T.grad_check(lambda: T.cross_entropy(x, np.array([0, 2, 1, 1])), {"x": x})
        assert err["x"] < 1e-6

    def test_kl_to_logits(self, f64):
        x = _param(Rng(13), 3, 4)
        target = np.array([[0.5, 0.5, 0.0, 0.0], [0.1, 0.2, 0.3, 0.4], [0, 0, 0, 1.0]])
        err = T.grad_check(lambda: T.kl_to_logits(target, x, 0.75), {"x": x})
        assert err["x"] < 1e-6


class TestLosses:
    def test_cross_entropy_uniform(self, f64):
        loss = T.cross_entropy(T.Tensor(np.zeros((2, 4))), np.array([0, 3]))
        assert loss.item() == pytest.approx(np.log(4))

    def test_kl_zero_when_equal(self, f64):
        p = np.array([[0.2, 0.8, 0.0]])
        assert T.kl_divergence(p, np.array([[0.2, 0.799, 0.001]])).item() > 0
        logits = np.log(np.array([[0.2, 0.3, 0.5]]))
        assert T.kl_to_logits(np.array([[0.2, 0.3, 0.5]]), T.Tensor(logits)).item() == pytest.approx(0, abs=1e-12)

    def test_kl_matches_scalar_formula(self, f64):
        p = np.array([[0.1, 0.6, 0.3], [0.5, 0.0, 0.5]])
        q = np.array([[0.2, 0.5, 0.3], [0.25, 0.25, 0.5]])
        want = np.mean([sum(pi * np.log(pi / qi) for pi, qi in zip(pr, qr) if pi > 0) for pr, qr in zip(p, q)])
        assert T.kl_divergence(p, q).item() == pytest.approx(want, rel=1e-12)
        assert T.kl_to_logits(p, T.Tensor(np.log(q))).item() == pytest.approx(want, rel=1e-10)

    def test_kl_rejects_unnormalised(self):
        with pytest.raises(ValueError):
            T.kl_divergence(np.array([[0.5, 0.6]]), np.array([[0.5, 0.5]]))

    def test_softmax_rejects_nonfinite(self):
        with pytest.raises(NonFiniteError):
            T.softmax(T.Tensor(np.array([1.0, np.nan])))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    def test_softmax_rows_sum_to_one(self, xs):
        with T.precision("float64"):
            y = T.softmax(T.Tensor(np.array([xs, xs[::-1]]))).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y >= 0)


class TestOptim:
    def test_adamw_minimises_quadratic(self, f64):
        x = T.parameter(np.array([3.0, -2.0]))
        opt = T.AdamW([x], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            opt.zero_grad()
            ((x - 1.0) ** 2).sum().backward()
            opt.step()
        np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-2)

    def test_adamw_decay_is_decoupled(self, f64):
        x = T.parameter(np.array([2.0]))
        opt = T.AdamW([x], lr=0.1, weight_decay=0.5)
        x.grad = np.zeros(1)
        opt.step()
        # zero gradient: only the decay acts
        assert x.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_clip_grad_norm(self, f64):
        a, b = T.parameter(np.zeros(2)), T.parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        total = T.clip_grad_norm([a, b], 1.0)
        assert total == pytest.approx(5.0)
        assert np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()) == pytest.approx(1.0)

    def test_linear_schedule(self):
        lrs = [T.linear_schedule(s, 10, 2, 1.0) for s in range(11)]
        assert lrs[0] == pytest.approx(0.5) and lrs[1] == pytest.approx(1.0)
        assert lrs[2] == pytest.approx(1.0) and lrs[10] == 0.0
        assert all(x >= y for x, y in zip(lrs[2:], lrs[3:]))


class TestRng:
    def test_children_reproducible_and_distinct(self):
        a = Rng(5).child("x", 1).normal(size=4)
        b = Rng(5).child("x", 1).normal(size=4)
        c = Rng(5).child("x", 2).normal(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_child_independent_of_parent_use(self):
        r = Rng(9)
        first = r.child("k").random(3)
        r.random(100)
        np.testing.assert_array_equal(first, r.child("k").random(3))


class TestGradCheckHelper:
    def test_detects_wrong_gradient(self, f64):
        x = T.parameter(np.array([1.0, 2.0]))

        def broken():
            out = Tensor._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # should be 2x
            return T.tsum(out)

        assert T.grad_check(broken, {"x": x})["x"] > 0.4
