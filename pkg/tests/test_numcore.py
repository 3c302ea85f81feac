import numpy as np
import pytest
from conftest import fd_check
from hypothesis import given, settings
from hypothesis import strategies as st

from grn.numcore import BackwardError, Graph, Node, ShapeError, parameter


def leaf(a):
    return Node(np.array(a, dtype=np.float64), requires_grad=True)


def well_separated(rng, shape, margin=1e-3):
    """Random values whose entries along the last-but-one axis differ by > margin."""
    while True:
        x = rng.standard_normal(shape)
        s = np.sort(x, axis=-2)
        if (np.diff(s, axis=-2) > margin).all():
            return x


class TestLinear:
    def test_identity(self):
        out = Graph().linear(leaf([[1, 2]]), leaf([[1, 0], [0, 1]]), leaf([0, 0]))
        np.testing.assert_array_equal(out.data, [[1, 2]])

    def test_hand_arithmetic(self):
        out = Graph().linear(leaf([[1, 1]]), leaf([[2, 3]]), leaf([1]))
        np.testing.assert_array_equal(out.data, [[6]])

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
            Graph().linear(leaf(np.zeros((1, 3))), leaf(np.zeros((2, 2))), leaf(np.zeros(2)))

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x, W, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
        assert fd_check(lambda g, n: g.linear(*n), [x, W, b]) < 1e-6


class TestConv1d:
    def test_unit_kernel_identity(self):
        x = np.arange(12.0).reshape(4, 3)
        k = np.eye(3)[:, None, :]  # [D_out, 1, D_in]
        out = Graph().conv1d(leaf(x), leaf(k), pad=0)
        np.testing.assert_array_equal(out.data, x)

    def test_same_padding_length(self):
        out = Graph().conv1d(leaf(np.ones((3, 2))), leaf(np.ones((4, 3, 2))), pad=1)
        assert out.shape == (3, 4)

    def test_window_values(self):
        # kernel sums the window of a single channel
        x = np.array([[1.0], [2.0], [3.0]])
        out = Graph().conv1d(leaf(x), leaf(np.ones((1, 3, 1))), pad=1)
        np.testing.assert_array_equal(out.data[:, 0], [3, 6, 5])

    def test_empty_output(self):
        with pytest.raises(ShapeError, match="exceeds"):
            Graph().conv1d(leaf(np.ones((2, 1))), leaf(np.ones((1, 5, 1))), pad=1)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        x, k, b = rng.standard_normal((5, 3)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
        assert fd_check(lambda g, n: g.conv1d(n[0], n[1], n[2], pad=1), [x, k, b]) < 1e-6

    def test_gradient_batched(self):
        rng = np.random.default_rng(12)
        x, k = rng.standard_normal((2, 3, 4, 2)), rng.standard_normal((3, 5, 2))
        assert fd_check(lambda g, n: g.conv1d(n[0], n[1], pad=2), [x, k]) < 1e-6


class TestMaxOverTime:
    def test_per_channel_max(self):
        np.testing.assert_array_equal(Graph().max_over_time(leaf([[1, 5], [3, 2]])).data, [3, 5])

    def test_single_row(self):
        np.testing.assert_array_equal(Graph().max_over_time(leaf([[4, -1]])).data, [4, -1])

    def test_tie_goes_to_first_row(self):
        g = Graph()
        x = leaf([[2, 2], [2, 2]])
        g.backward(g.sum(g.max_over_time(x)))
        np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0]])

    def test_empty(self):
        with pytest.raises(ShapeError):
            Graph().max_over_time(leaf(np.zeros((0, 3))))

    def test_mask_excludes_positions(self):
        out = Graph().max_over_time(leaf([[1.0], [9.0], [2.0]]), mask=np.array([True, False, True]))
        np.testing.assert_array_equal(out.data, [2.0])

    def test_fully_masked_row_is_zero(self):
        out = Graph().max_over_time(leaf([[[5.0]], [[1.0]]]), mask=np.array([[False], [True]]))
        np.testing.assert_array_equal(out.data, [[0.0], [1.0]])

    def test_gradient(self):
        x = well_separated(np.random.default_rng(3), (6, 4))
        assert fd_check(lambda g, n: g.max_over_time(n[0]), [x]) < 1e-6


class TestMaxAcross:
    def test_idempotent(self):
        a = np.array([[1.0, -2.0]])
        np.testing.assert_array_equal(Graph().max_across([leaf(a), leaf(a)]).data, a)

    def test_three_branches(self):
        out = Graph().max_across([leaf([[1.0]]), leaf([[2.0]]), leaf([[3.0]])])
        np.testing.assert_array_equal(out.data, [[3.0]])

    def test_errors(self):
        with pytest.raises(ShapeError):
            Graph().max_across([])
        with pytest.raises(ShapeError):
            Graph().max_across([leaf(np.zeros((1, 2))), leaf(np.zeros((2, 1)))])

    def test_gradient(self):
        x = well_separated(np.random.default_rng(13), (3, 4, 5))
        assert fd_check(lambda g, n: g.max_across(list(n)), [x[0], x[1], x[2]]) < 1e-6


class TestActivation:
    def test_values(self):
        assert Graph().sigmoid(leaf(0.0)).data == 0.5
        assert Graph().tanh(leaf(0.0)).data == 0.0

    def test_sigmoid_extremes_are_finite(self):
        out = Graph().sigmoid(leaf([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    @pytest.mark.parametrize("kind", ["tanh", "sigmoid"])
    def test_gradient(self, kind):
        x = np.random.default_rng(5).standard_normal((3, 4)) * 2
        assert fd_check(lambda g, n: g.activation(n[0], kind), [x]) < 1e-6

    def test_unknown(self):
        with pytest.raises(ValueError):
            Graph().activation(leaf(1.0), "relu")


class TestDropout:
    def test_rate_zero_identity(self):
        x = leaf(np.ones(5))
        assert Graph(seed=0).dropout(x, 0.0, training=True) is x

    def test_eval_identity(self):
        x = leaf(np.ones(5))
        assert Graph(seed=0).dropout(x, 0.5, training=False) is x

    def test_rate_range(self):
        with pytest.raises(ValueError):
            Graph().dropout(leaf(np.ones(2)), 1.0, training=True)

    def test_zero_fraction_and_scale(self):
        out = Graph(seed=123).dropout(leaf(np.ones(10 ** 6)), 0.5, training=True).data
        assert abs((out == 0).mean() - 0.5) < 0.01
        np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])

    def test_deterministic_given_seed(self):
        a = Graph(seed=4).dropout(leaf(np.ones(50)), 0.3, True).data
        b = Graph(seed=4).dropout(leaf(np.ones(50)), 0.3, True).data
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_sum_gives_ones(self):
        g, x = Graph(), leaf(np.arange(6.0).reshape(2, 3))
        g.backward(g.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_identity_chain(self):
        g, x = Graph(), leaf([[1.0, 2.0]])
        eye, zero = leaf(np.eye(2)), leaf(np.zeros(2))
        y = x
        for _ in range(4):
            y = g.linear(y, eye, zero)
        g.backward(g.sum(y))
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0]])

    def test_diamond_accumulates(self):
        g, x = Graph(), leaf([1.0, 2.0])
        a = g.tanh(x)
        b = g.sigmoid(x)
        g.backward(g.sum(g.add(a, b)))
        t, s = np.tanh(x.data), 1 / (1 + np.exp(-x.data))
        np.testing.assert_allclose(x.grad, (1 - t * t) + s * (1 - s), rtol=1e-12)

    def test_reused_node_accumulates(self):
        g, x = Graph(), leaf([3.0])
        g.backward(g.sum(g.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_non_scalar_rejected(self):
        g, x = Graph(), leaf([1.0, 2.0])
        with pytest.raises(BackwardError, match="scalar"):
            g.backward(g.tanh(x))

    def test_double_backward_rejected_until_reset(self):
        g, x = Graph(), leaf([1.0])
        loss = g.sum(g.tanh(x))
        g.backward(loss)
        with pytest.raises(BackwardError):
            g.backward(loss)
        g.zero_grad()
        assert x.grad is None
        g.backward(loss)
        assert x.grad is not None

    def test_topological_order(self):
        g, x = Graph(), leaf([1.0])
        g.sum(g.add(g.tanh(x), g.sigmoid(x)))
        pos = {id(n): i for i, n in enumerate(g.nodes)}
        for n in g.nodes:
            for p in n.parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(n)]

    def test_grad_shape_matches_data(self):
        g, W = Graph(), parameter(np.ones((3, 2)))
        g.backward(g.sum(g.linear(leaf(np.ones((4, 2))), W)))
        assert W.grad.shape == W.data.shape

    def test_embedding_padding_row_frozen(self):
        g, E = Graph(), leaf(np.arange(6.0).reshape(3, 2))
        g.backward(g.sum(g.embedding(E, np.array([0, 1, 1, 2]), padding_idx=0)))
        np.testing.assert_array_equal(E.grad, [[0, 0], [2, 2], [1, 1]])

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            Graph().embedding(leaf(np.zeros((2, 2))), np.array([2]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_concat_gradient_routes_slices(t, d, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.standard_normal((t, d))), leaf(rng.standard_normal((t, d + 1)))
    g = Graph()
    w = rng.standard_normal((t, 2 * d + 1))
    g.backward(g.sum(g.mul_const(g.concat([a, b]), w)))
    np.testing.assert_array_equal(a.grad, w[:, :d])
    np.testing.assert_array_equal(b.grad, w[:, d:])


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    x, k = leaf(rng.standard_normal((5, 3))), leaf(rng.standard_normal((2, 3, 3)))
    a = Graph(seed=9).dropout(Graph().conv1d(x, k, pad=1), 0.5, True).data
    b = Graph(seed=9).dropout(Graph().conv1d(x, k, pad=1), 0.5, True).data
    np.testing.assert_array_equal(a, b)
