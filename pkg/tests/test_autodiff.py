import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdnet.autodiff import (
    BackwardError,
    Graph,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    UnboundInputError,
    backward,
    concat_channels,
    finite_diff_check,
    forward_eval,
    log,
    mul,
    reshape,
    split_channels,
    sum_all,
    take_channels,
    tensor_from_bytes,
    tensor_to_bytes,
)
from fdnet.layers import batch_norm, conv2d, relu


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestForwardEval:
    def test_relu_graph(self):
        g = Graph(lambda x: relu(x), ["x"])
        out = forward_eval(g, {"x": [-1.0, 2.0]})
        np.testing.assert_array_equal(out["output"].data, [0.0, 2.0])

    def test_identity_reshape_chain(self):
        x = rand(2, 2)
        g = Graph(lambda x: reshape(reshape(reshape(x, (4,)), (1, 4)), (2, 2)), ["x"])
        out = forward_eval(g, {"x": x})["output"]
        assert np.array_equal(out.data, x)

    def test_unbound_input(self):
        g = Graph(lambda x, y: x + y, ["x", "y"])
        with pytest.raises(UnboundInputError, match="y"):
            forward_eval(g, {"x": 1.0})

    def test_shape_error_names_node(self):
        w = Parameter(rand(4, 3, 3, 3))
        with pytest.raises(ShapeError, match=r"enc\.conv.*expected 3 input channels, got 2"):
            conv2d(Tensor(rand(1, 2, 8, 8)), w, name="enc.conv")

    def test_pure(self):
        w = Parameter(rand(4, 2, 3, 3, seed=1))
        x = rand(1, 2, 6, 6, seed=2)
        g = Graph(lambda x: relu(conv2d(x, w, padding=1)), ["x"])
        a = forward_eval(g, {"x": x})["output"].data.copy()
        b = forward_eval(g, {"x": x})["output"].data
        assert a.tobytes() == b.tobytes()

    def test_graph_nodes_topological(self):
        g = Graph(lambda x: {"loss": sum_all(relu(x) * x)}, ["x"])
        forward_eval(g, {"x": Tensor([1.0, -2.0], requires_grad=True)})
        nodes = g.nodes()
        pos = {id(n): i for i, n in enumerate(nodes)}
        for n in nodes:
            for p in n.parents:
                assert pos[id(p)] < pos[id(n)]


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(rand(2, 3, 4), requires_grad=True)
        backward(sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        backward(sum_all(x * x))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(BackwardError, match="scalar"):
            backward(x * x)

    def test_backward_before_forward(self):
        g = Graph(lambda x: sum_all(x), ["x"])
        with pytest.raises(BackwardError, match="before forward"):
            backward(g)

    def test_backward_through_graph(self):
        w = Parameter([2.0, -1.0], ident="w")
        g = Graph(lambda x: {"loss": sum_all(mul(x, w))}, ["x"])
        forward_eval(g, {"x": [3.0, 5.0]})
        grads = backward(g)
        np.testing.assert_array_equal(grads["w"], [3.0, 5.0])

    def test_fan_out_matches_duplicated_graph(self):
        data = rand(5, seed=3)
        a = Tensor(data, requires_grad=True)
        r = relu(a)
        backward(sum_all(r * r + r * 3.0 + r))
        # same function with the shared relu recomputed for every consumer
        b = Tensor(data, requires_grad=True)
        backward(sum_all(relu(b) * relu(b) + relu(b) * 3.0 + relu(b)))
        np.testing.assert_allclose(a.grad, b.grad, rtol=0, atol=1e-15)

    def test_parameter_grads_returned_by_ident(self):
        p = Parameter(rand(3), ident="layer.weight")
        grads = backward(sum_all(p * p))
        assert set(grads) == {"layer.weight"}
        np.testing.assert_allclose(grads["layer.weight"], 2 * p.data)


class TestFiniteDiff:
    def test_relu_away_from_kink(self):
        x = rand(4, 5, seed=4)
        x[np.abs(x) < 1e-3] = 0.5
        assert finite_diff_check(relu, Tensor(x), eps=1e-5) < 1e-6

    def test_conv3x3(self):
        x = Tensor(rand(1, 2, 8, 8, seed=5))
        w = Tensor(rand(3, 2, 3, 3, seed=6))
        err = finite_diff_check(lambda x, w: conv2d(x, w, padding=1), [x, w], eps=1e-5)
        assert err < 1e-5

    def test_batch_norm_training(self):
        x = Tensor(rand(4, 3, 2, 2, seed=7))
        gamma, beta = Tensor(rand(3, seed=8)), Tensor(rand(3, seed=9))
        rm, rv = np.zeros(3), np.ones(3)
        fn = lambda x, g, b: mul(batch_norm(x, g, b, rm, rv, True), Tensor(rand(4, 3, 2, 2, seed=10)))
        assert finite_diff_check(fn, [x, gamma, beta], eps=1e-5) < 1e-4

    def test_eps_range(self):
        with pytest.raises(ValueError):
            finite_diff_check(relu, Tensor([1.0]), eps=1e-2)

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            finite_diff_check(lambda x: log(x), Tensor([-1.0, 1.0]), eps=1e-5)

    def test_sampled_coordinates(self):
        x = Tensor(rand(50, seed=11))
        assert finite_diff_check(lambda x: x * x, x, eps=1e-5, n_samples=10, seed=3) < 1e-8


class TestConcat:
    def test_shapes(self):
        out = concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.ones((1, 3, 4, 4)))])
        assert out.shape == (1, 5, 4, 4)
        assert np.all(out.data[:, :2] == 0) and np.all(out.data[:, 2:] == 1)

    def test_single_identity(self):
        x = Tensor(rand(1, 3, 4, 4))
        assert concat_channels([x]).data.tobytes() == x.data.tobytes()

    def test_grad_all_ones(self):
        a = Tensor(rand(1, 2, 3, 3), requires_grad=True)
        b = Tensor(rand(1, 4, 3, 3), requires_grad=True)
        backward(sum_all(concat_channels([a, b])))
        assert np.all(a.grad == 1) and np.all(b.grad == 1)

    def test_spatial_mismatch_lists_extents(self):
        with pytest.raises(ShapeError, match=r"1x4x4.*1x5x5"):
            concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 5)))])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 1000))
    def test_concat_split_round_trip(self, sizes, seed):
        parts = [Tensor(rand(2, c, 3, 3, seed=seed + i), requires_grad=True) for i, c in enumerate(sizes)]
        cat = concat_channels(parts)
        back = split_channels(cat, sizes)
        for p, q in zip(parts, back):
            assert np.array_equal(p.data, q.data)
        weights = [rand(*p.shape, seed=seed + 100 + i) for i, p in enumerate(parts)]
        backward(sum(sum_all(mul(q, w)) for q, w in zip(back, weights)))
        for p, w in zip(parts, weights):
            assert np.array_equal(p.grad, w)


def test_take_channels_gradient():
    x = Tensor(rand(2, 3, 4, 4, seed=12))
    idx = np.random.default_rng(0).integers(0, 3, size=(2, 4, 4))
    assert finite_diff_check(lambda x: take_channels(x, idx), x, eps=1e-5) < 1e-8


class TestSerialization:
    def test_layout(self):
        arr = np.arange(6, dtype=float).reshape(2, 3)
        raw = tensor_to_bytes(arr)
        assert raw[:8] == b"FDTENSR1"
        assert struct.unpack("<III", raw[8:20]) == (2, 2, 3)
        assert np.array_equal(np.frombuffer(raw[20:], "<f8"), arr.ravel())

    def test_round_trip(self):
        arr = rand(2, 3, 4, seed=13)
        buf = tensor_to_bytes(arr) + tensor_to_bytes(arr[0])
        a, off = tensor_from_bytes(buf)
        b, end = tensor_from_bytes(buf, off)
        assert np.array_equal(a, arr) and np.array_equal(b, arr[0]) and end == len(buf)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            tensor_from_bytes(b"NOTATENS" + bytes(12))
