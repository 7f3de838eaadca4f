import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbp import tensor as T
from nbp.errors import AggregationError, DimensionError
from nbp.tensor import MlpParams, Tensor, mlp_forward, numeric_grad, relative_error


def _param(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


def _check(loss_fn, params, tol=1e-4):
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    for p in params:
        num = numeric_grad(loss_fn, p, eps=1e-5)
        assert relative_error(p.grad, num) < tol, p


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_selector_row(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = _param(rng, 3, 4), _param(rng, 4, 2)
        _check(lambda: T.tsum(T.matmul(a, b)), [a, b])

    def test_matvec_gradient(self):
        rng = np.random.default_rng(1)
        a, v, w = _param(rng, 3, 4), _param(rng, 4), _param(rng, 3)
        _check(lambda: T.tsum(T.mul(T.matmul(a, v), w)), [a, v, w])


class TestReduce:
    def test_mean(self):
        out = T.reduce([Tensor([1.0, 3.0]), Tensor([3.0, 1.0])], "mean")
        np.testing.assert_array_equal(out.data, [2.0, 2.0])

    def test_max(self):
        out = T.reduce([Tensor([1.0, 3.0]), Tensor([3.0, 1.0])], "max")
        np.testing.assert_array_equal(out.data, [3.0, 3.0])

    def test_single_element_mean_is_identity(self):
        x = Tensor([0.3, -1.7, 2.5])
        np.testing.assert_array_equal(T.reduce([x], "mean").data, x.data)

    def test_empty_list(self):
        with pytest.raises(AggregationError):
            T.reduce([], "mean")

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.reduce([Tensor([1.0]), Tensor([1.0, 2.0])], "sum")

    def test_max_tie_routes_to_lowest_index(self):
        a, b = Tensor([2.0, 1.0], requires_grad=True), Tensor([2.0, 5.0], requires_grad=True)
        T.tsum(T.reduce([a, b], "max")).backward()
        np.testing.assert_array_equal(a.grad, [1.0, 0.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0])

    @pytest.mark.parametrize("mode", ["mean", "max", "sum"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(2)
        xs = [_param(rng, 5) for _ in range(3)]
        w = Tensor(rng.uniform(-1, 1, 5))
        _check(lambda: T.tsum(T.mul(T.reduce(xs, mode), w)), xs)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=6),
           st.randoms(use_true_random=False))
    def test_mean_permutation_invariant(self, rows, rnd):
        xs = [Tensor(r) for r in rows]
        ys = list(xs)
        rnd.shuffle(ys)
        np.testing.assert_array_equal(T.reduce(xs, "mean").data, T.reduce(ys, "mean").data)


class TestSegmentReduce:
    def test_matches_list_reduce(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(6, 3))
        seg = [0, 1, 0, 2, 1, 0]
        for mode in ("mean", "max", "sum"):
            out = T.segment_reduce(Tensor(x), seg, 3, mode).data
            for s in range(3):
                ref = T.reduce([Tensor(x[i]) for i in range(6) if seg[i] == s], mode).data
                np.testing.assert_allclose(out[s], ref, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("mode", ["mean", "max", "sum"])
    def test_gradient(self, mode):
        rng = np.random.default_rng(4)
        x = _param(rng, 7, 4)
        w = Tensor(rng.uniform(-1, 1, (3, 4)))
        seg = [2, 0, 1, 1, 0, 2, 2]
        _check(lambda: T.tsum(T.mul(T.segment_reduce(x, seg, 3, mode), w)), [x])

    def test_empty_segment_rejected(self):
        with pytest.raises(AggregationError):
            T.segment_reduce(Tensor(np.ones((2, 2))), [0, 0], 2, "mean")


class TestOtherOps:
    def test_gather_concat_reshape_batched_matvec_gradients(self):
        rng = np.random.default_rng(5)
        a, b = _param(rng, 4, 3), _param(rng, 4, 2)
        q = _param(rng, 5, 2, 3)

        def loss():
            rows = T.gather(a, [0, 3, 3, 1, 2])
            joined = T.concat([T.gather(b, [1, 1, 0, 2, 3]), rows], axis=1)
            flat = T.reshape(joined, (25,))
            out = T.batched_matvec(q, rows)
            return T.tsum(T.relu(out)) + T.tsum(T.mul(flat, flat))

        _check(loss, [a, b, q])

    def test_tanh_gradient_and_range(self):
        rng = np.random.default_rng(7)
        a = _param(rng, 3, 4)
        _check(lambda: T.tsum(T.mul(T.tanh(T.scale(a, 3.0)), a)), [a])
        assert np.all(np.abs(T.tanh(Tensor([[-50.0, 50.0]])).data) <= 1.0)

    def test_add_row_broadcast_gradient(self):
        rng = np.random.default_rng(6)
        a, b = _param(rng, 3, 2), _param(rng, 2)
        _check(lambda: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [a, b])

    def test_add_rejects_general_broadcast(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((3, 2))), Tensor(np.ones((3,))))

    def test_backward_visits_shared_node_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.mul(x, x)
        z = T.add(y, y)
        T.tsum(z).backward()
        np.testing.assert_allclose(x.grad, [8.0])


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert T.softmax_cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-15)

    def test_stability(self):
        loss = T.softmax_cross_entropy(Tensor([1000.0, 0.0]), 0).item()
        assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)

    def test_target_range(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros(3)), 3)

    def test_gradient_is_softmax_minus_one_hot(self):
        rng = np.random.default_rng(7)
        z = _param(rng, 5)
        T.softmax_cross_entropy(z, 3).backward()
        expected = T.softmax(z.data) - np.eye(5)[3]
        np.testing.assert_allclose(z.grad, expected, atol=1e-15)
        num = numeric_grad(lambda: T.softmax_cross_entropy(z, 3), z)
        assert relative_error(z.grad, num) < 1e-4

    def test_rows_with_weights(self):
        rng = np.random.default_rng(8)
        z = _param(rng, 4, 3)
        targets, weights = [0, 2, 1, 1], [1.0, 0.0, 2.0, 1.0]
        loss = T.cross_entropy_rows(z, targets, weights).item()
        ref = sum(w * T.softmax_cross_entropy(Tensor(z.data[i]), t).item()
                  for i, (t, w) in enumerate(zip(targets, weights))) / 4.0
        assert loss == pytest.approx(ref, rel=1e-13)
        _check(lambda: T.cross_entropy_rows(z, targets, weights), [z])


class TestMlp:
    def test_zero_network(self):
        p = MlpParams([Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 2)))], [Tensor(np.zeros(4)), Tensor(np.zeros(2))])
        np.testing.assert_array_equal(mlp_forward(p, Tensor([1.0, -2.0, 3.0])).data, [0.0, 0.0])

    def test_identity_layer(self):
        p = MlpParams([Tensor(np.eye(3))], [Tensor(np.zeros(3))])
        x = Tensor([[0.5, -1.0, 2.0], [1.0, 1.0, -3.0]])
        np.testing.assert_array_equal(mlp_forward(p, x).data, x.data)

    def test_width_mismatch(self):
        p = MlpParams.init([3, 2], np.random.default_rng(0))
        with pytest.raises(DimensionError):
            mlp_forward(p, Tensor(np.ones(4)))

    def test_two_layer_gradient(self):
        rng = np.random.default_rng(9)
        p = MlpParams.init([3, 5, 2], rng)
        for b in p.biases:
            b.data.flags.writeable = True
            b.data[:] = rng.uniform(-0.5, 0.5, b.shape)
            b.data.flags.writeable = False
        x = _param(rng, 4, 3)
        _check(lambda: T.tsum(T.mul(mlp_forward(p, x), mlp_forward(p, x))), p.parameters() + [x])

    def test_init_is_seeded_and_bounded(self):
        a = MlpParams.init([6, 4, 3], np.random.default_rng(11))
        b = MlpParams.init([6, 4, 3], np.random.default_rng(11))
        c = MlpParams.init([6, 4, 3], np.random.default_rng(12))
        for x, y in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(x.data, y.data)
        assert not np.array_equal(a.weights[0].data, c.weights[0].data)
        for w in a.weights:
            assert np.abs(w.data).max() <= math.sqrt(6 / w.shape[0])


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng = np.random.default_rng(10)
        p = MlpParams.init([4, 8, 3], rng)
        x = Tensor(rng.uniform(-1, 1, (5, 4)))
        first = mlp_forward(p, x).data.tobytes()
        assert all(mlp_forward(p, x).data.tobytes() == first for _ in range(3))

    def test_property_finite_differences_random_inputs(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            a, b = _param(rng, 2, 3), _param(rng, 3, 3)
            _check(lambda: T.tsum(T.relu(T.matmul(T.concat([a, a], axis=0), b))), [a, b])
