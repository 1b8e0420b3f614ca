import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crelab import autodiff as ad
from crelab.autodiff import ParamStore, Tensor
from crelab.errors import LabelError, NumericError, ShapeError

from helpers import max_rel_err, numeric_grad, softmax_rows


def _project(t: Tensor, r: np.ndarray) -> Tensor:
    """Scalar loss sum(t * r) for a fixed random r."""
    return ad.sum_all(ad.mul(t, Tensor(r)))


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_unit_selector(self):
        out = ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a_np, b_np, r = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        a, b = Tensor(a_np.copy(), requires_grad=True), Tensor(b_np.copy(), requires_grad=True)
        _project(ad.matmul(a, b), r).backward()
        num_a = numeric_grad(lambda: float(((a_np @ b_np) * r).sum()), a_np)
        num_b = numeric_grad(lambda: float(((a_np @ b_np) * r).sum()), b_np)
        assert max_rel_err(a.grad, num_a) < 1e-6
        assert max_rel_err(b.grad, num_b) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestLayerNorm:
    def test_already_normalised(self):
        out = ad.layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-10)

    @pytest.mark.parametrize("c", [-3.0, 0.0, 2.5])
    def test_constant_input_collapses_to_bias(self, c):
        out = ad.layer_norm(Tensor([c, c]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-5)
        np.testing.assert_array_equal(out.data, [0.0, 0.0])
        out = ad.layer_norm(Tensor([c, c]), Tensor([2.0, 3.0]), Tensor([0.5, -1.0]), eps=1e-5)
        np.testing.assert_array_equal(out.data, [0.5, -1.0])

    def test_degenerate_width(self):
        with pytest.raises(ValueError):
            ad.layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        x_np, g_np, b_np, r = (rng.normal(size=8) for _ in range(4))

        def f():
            mu = x_np.mean()
            var = ((x_np - mu) ** 2).mean()
            return float((((x_np - mu) / np.sqrt(var + 1e-5) * g_np + b_np) * r).sum())

        x, g, b = (Tensor(v.copy(), requires_grad=True) for v in (x_np, g_np, b_np))
        _project(ad.layer_norm(x, g, b, 1e-5), r).backward()
        for t, v in ((x, x_np), (g, g_np), (b, b_np)):
            assert max_rel_err(t.grad, numeric_grad(f, v)) < 1e-5


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [0])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct(self):
        loss = ad.softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0])
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        z_np = rng.normal(size=(5, 7))
        y = rng.integers(0, 7, size=5)

        def f():
            p = softmax_rows(z_np)
            return float(-np.mean(np.log(p[np.arange(5), y])))

        z = Tensor(z_np.copy(), requires_grad=True)
        ad.softmax_cross_entropy(z, y).backward()
        assert max_rel_err(z.grad, numeric_grad(f, z_np)) < 1e-5

    def test_bad_label_reports_index(self):
        with pytest.raises(LabelError, match="index 2"):
            ad.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 4])
        with pytest.raises(LabelError):
            ad.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [-1])

    def test_numerically_stable_for_huge_logits(self):
        loss = ad.softmax_cross_entropy(Tensor([[1e4, 0.0, -1e4]]), [1])
        assert loss.item() == pytest.approx(1e4)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0]))
        p.grad = np.array([1.0])
        ad.adam_step(store, lr=0.1)
        # m_hat = 1, v_hat = 1 after bias correction
        assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert p.grad is None

    def test_zero_gradient_leaves_param(self):
        store = ParamStore()
        p = store.add("p", np.array([0.3, -2.0]))
        p.grad = np.zeros(2)
        ad.adam_step(store, lr=0.1)
        np.testing.assert_array_equal(p.data, [0.3, -2.0])

    def test_zero_lr_is_bitwise_noop(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        p = store.add("p", rng.normal(size=(4, 3)))
        before = p.data.copy()
        for _ in range(5):
            p.grad = rng.normal(size=(4, 3))
            ad.adam_step(store, lr=0.0)
        assert before.tobytes() == p.data.tobytes()

    def test_empty_store_noop(self):
        store = ParamStore()
        ad.adam_step(store, lr=0.1)
        assert store.step == 0

    def test_deterministic_runs(self):
        def run():
            rng = np.random.default_rng(4)
            store = ParamStore()
            w = store.add("w", rng.normal(size=(3, 2)))
            x = Tensor(rng.normal(size=(8, 3)))
            y = rng.integers(0, 2, size=8)
            for _ in range(100):
                ad.softmax_cross_entropy(ad.matmul(x, w), y).backward()
                ad.adam_step(store, lr=0.01)
            return w.data.tobytes()

        assert run() == run()

    def test_per_parameter_rates(self):
        store = ParamStore()
        a = store.add("a", np.array([1.0]))
        b = store.add("b", np.array([1.0]))
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        ad.adam_step(store, {"a": 0.1, "b": 0.0})
        assert a.data[0] < 1.0 and b.data[0] == 1.0

    def test_moments_start_at_zero_and_step_monotone(self):
        store = ParamStore()
        p = store.add("p", np.ones((2, 2)))
        assert not store.m["p"].any() and not store.v["p"].any()
        steps = []
        for _ in range(3):
            p.grad = np.ones((2, 2))
            ad.adam_step(store, 0.01)
            steps.append(store.step)
        assert steps == [1, 2, 3]
        assert store.m["p"].shape == p.shape


class TestGradCheck:
    def test_quadratic_linear_model(self):
        rng = np.random.default_rng(5)
        X, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))
        store = ParamStore()
        w = store.add("w", rng.normal(size=(3, 1)))

        def closure():
            resid = ad.add(ad.matmul(Tensor(X), w), Tensor(-y))
            return ad.mean_all(ad.mul(resid, resid))

        assert ad.grad_check(closure, store) < 1e-8

    def test_rejects_non_positive_step(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.sum_all(store["w"]), store, h=0.0)

    def test_non_finite_loss(self):
        store = ParamStore()
        store.add("w", np.array([np.inf, 1.0]))
        with pytest.raises(NumericError):
            ad.grad_check(lambda: ad.sum_all(store["w"]), store)


class TestTape:
    def test_backward_twice_is_an_error(self):
        w = Tensor(np.ones(3), requires_grad=True)
        loss = ad.sum_all(ad.mul(w, w))
        loss.backward()
        with pytest.raises(RuntimeError, match="twice"):
            loss.backward()

    def test_fresh_forward_after_backward(self):
        w = Tensor(np.ones(3), requires_grad=True)
        ad.sum_all(ad.mul(w, w)).backward()
        ad.sum_all(ad.mul(w, w)).backward()
        np.testing.assert_array_equal(w.grad, [4.0, 4.0, 4.0])

    def test_shared_subexpression_visited_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.mul(x, x)
        z = ad.add(y, y)
        ad.sum_all(z).backward()
        assert x.grad[0] == pytest.approx(8.0)

    def test_non_scalar_backward_needs_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            ad.mul(x, x).backward()


_vals = arrays(np.float64, (3, 4), elements=st.floats(-2, 2, allow_nan=False, allow_infinity=False))


@settings(max_examples=30, deadline=None)
@given(_vals)
def test_softmax_rows_are_distributions(z):
    p = ad.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert ((p > 0) & (p < 1)).all()


_OPS = {
    "gelu": lambda t: ad.gelu(t),
    "softmax": lambda t: ad.softmax(t),
    "layer_norm": lambda t: ad.layer_norm(t, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.zeros(4))),
    "transpose_matmul": lambda t: ad.matmul(ad.transpose(t, (1, 0)), t),
    "concat_scale": lambda t: ad.scale(ad.concat([t, ad.neg(t)], axis=-1), 0.7),
    "reshape": lambda t: ad.reshape(t, (4, 3)),
    "embedding": lambda t: ad.embedding(t, np.array([[0, 2], [2, 1]])),
    "take_positions": lambda t: ad.take_positions(ad.reshape(t, (3, 2, 2)), np.array([1, 0, 1])),
    "row_dots": lambda t: ad.row_dots(t, Tensor(np.linspace(-1, 1, 8).reshape(2, 4))),
    "linear": lambda t: ad.linear(t, Tensor(np.arange(8.0).reshape(4, 2) / 8), Tensor(np.ones(2))),
}


@pytest.mark.parametrize("op", sorted(_OPS))
@settings(max_examples=10, deadline=None)
@given(x=_vals)
def test_op_gradients_match_finite_differences(op, x):
    fn = _OPS[op]
    rng = np.random.default_rng(abs(hash(op)) % 2**32)
    out_shape = fn(Tensor(x)).shape
    r = rng.normal(size=out_shape)
    t = Tensor(x.copy(), requires_grad=True)
    _project(fn(t), r).backward()
    x_np = x.copy()
    num = numeric_grad(lambda: float((fn(Tensor(x_np)).data * r).sum()), x_np)
    assert max_rel_err(t.grad, num, floor=1e-6) < 1e-4


def test_row_dots_matches_matmul_and_is_row_stable():
    rng = np.random.default_rng(8)
    x, w = rng.normal(size=(5, 7)), rng.normal(size=(4, 7))
    np.testing.assert_allclose(ad.row_dots_np(x, w), x @ w.T, atol=1e-12)
    wider = np.concatenate([w, rng.normal(size=(9, 7))])
    assert ad.row_dots_np(x, w).tobytes() == np.ascontiguousarray(ad.row_dots_np(x, wider)[:, :4]).tobytes()
    with pytest.raises(ShapeError):
        ad.row_dots(Tensor(x), Tensor(np.zeros((4, 6))))

