import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsprune import tensor as T
from capsprune.errors import ArgumentError, DimensionError, NumericError
from capsprune.tensor import Tape, Tensor, backward, gradcheck


def direct_conv(x, k, stride):
    N, C, H, W = x.shape
    F, _, kh, kw = k.shape
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for a in range(kh):
                            for b in range(kw):
                                acc += x[n, c, i * stride + a, j * stride + b] * k[f, c, a, b]
                    out[n, f, i, j] = acc
    return out


class TestTensor:
    def test_shape_and_data_agree(self):
        t = Tensor([[1, 2, 3], [4, 5, 6]])
        assert t.shape == (2, 3) and t.dtype == np.float32
        assert t.grad is None

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5

    def test_overflow_is_an_error(self):
        with pytest.raises(NumericError):
            T.exp(Tensor([100.0]))


class TestConv2d:
    def test_sum_of_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1)
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9

    def test_first_layer_geometry(self):
        x = Tensor(np.zeros((1, 1, 28, 28)))
        k = Tensor(np.zeros((256, 1, 9, 9)))
        assert T.conv2d(x, k, 1).shape == (1, 256, 20, 20)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_nested_loops(self, rng, stride):
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        k = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(k), stride).data
        np.testing.assert_allclose(out, direct_conv(x, k, stride), atol=1e-6)

    def test_conv2d_at_matches_dense(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 9, 9)))
        k = Tensor(rng.standard_normal((4, 3, 3, 3)))
        dense = T.conv2d(x, k, 2).data  # 4x4 output grid
        out = T.conv2d_at(x, k, 2, [5, 0], [[3, 1], [2]]).data
        np.testing.assert_allclose(out[:, 0], dense[:, 3, 1, 1], atol=1e-12)
        np.testing.assert_allclose(out[:, 1], dense[:, 1, 1, 1], atol=1e-12)
        np.testing.assert_allclose(out[:, 2], dense[:, 2, 0, 0], atol=1e-12)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 1, 2, 7, 7)).astype(np.float32)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        a, b = 0.7, -1.3
        lhs = T.conv2d(Tensor(a * x + b * y), k, 1).data
        rhs = a * T.conv2d(Tensor(x), k, 1).data + b * T.conv2d(Tensor(y), k, 1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_errors(self):
        x = Tensor(np.zeros((1, 2, 5, 5)))
        with pytest.raises(DimensionError):
            T.conv2d(x, Tensor(np.zeros((1, 3, 2, 2))), 1)
        with pytest.raises(DimensionError):
            T.conv2d(x, Tensor(np.zeros((1, 2, 6, 6))), 1)
        with pytest.raises(ArgumentError):
            T.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), 0)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        assert not T.relu(Tensor(-np.ones((3, 3)))).data.any()

    def test_relu_gradient_at_zero_is_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        with Tape() as tape:
            y = T.tsum(T.relu(x))
        backward(tape, y)
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_softmax_values(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(T.softmax(Tensor([np.log(1), np.log(3)], dtype=np.float64)).data,
                                   [0.25, 0.75], atol=1e-12)

    def test_softmax_bad_axis(self):
        with pytest.raises(ArgumentError):
            T.softmax(Tensor([1.0, 2.0]), axis=3)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_rows_and_shift_invariance(self, x, c):
        p = T.softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=1).data, p, atol=1e-6)


class TestMatvecBank:
    def test_identity(self):
        w = Tensor(np.eye(2).reshape(1, 1, 2, 2))
        np.testing.assert_allclose(T.matvec_bank(w, Tensor([[3.0, 4.0]])).data, [[[3, 4]]])

    def test_zero_weights(self, rng):
        out = T.matvec_bank(Tensor(np.zeros((2, 3, 4, 5))), Tensor(rng.standard_normal((2, 5))))
        assert out.shape == (2, 3, 4) and not out.data.any()

    def test_loop_oracle(self, rng):
        w = rng.standard_normal((2, 2, 3, 2))
        v = rng.standard_normal((2, 2))
        expect = np.zeros((2, 2, 3))
        for i in range(2):
            for j in range(2):
                for a in range(3):
                    expect[i, j, a] = sum(w[i, j, a, b] * v[i, b] for b in range(2))
        np.testing.assert_allclose(T.matvec_bank(Tensor(w), Tensor(v)).data, expect, atol=1e-6)

    def test_batched(self, rng):
        w = rng.standard_normal((3, 2, 4, 5))
        v = rng.standard_normal((6, 3, 5))
        out = T.matvec_bank(Tensor(w), Tensor(v)).data
        np.testing.assert_allclose(out, np.einsum("ijab,nib->nija", w, v), atol=1e-12)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            T.matvec_bank(Tensor(np.zeros((2, 2, 3, 2))), Tensor(np.zeros((3, 2))))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x * x)
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [2, -4])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ArgumentError):
            backward(tape, y)

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        assert not (x * 2.0).requires_grad

    def test_each_node_visited_once(self):
        x = Tensor([3.0], requires_grad=True)
        calls = []
        with Tape() as tape:
            y = x * x
            z = T.tsum(y + y)
        for node in tape.nodes:
            bw = node.backward

            def wrapped(g, bw=bw, node=node):
                calls.append(id(node))
                return bw(g)

            node.backward = wrapped
        backward(tape, z)
        assert len(calls) == len(set(calls)) == len(tape.nodes)
        np.testing.assert_allclose(x.grad, [12.0])

    def test_retain_grad_on_intermediate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            h = (x * 3.0).retain_grad()
            loss = T.tsum(h * h)
        backward(tape, loss)
        np.testing.assert_allclose(h.grad, [6.0, 12.0])
        np.testing.assert_allclose(x.grad, [18.0, 36.0])

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
        k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)

        def run():
            kt = Tensor(k, requires_grad=True)
            with Tape() as tape:
                loss = T.tsum(T.softmax(T.conv2d(Tensor(x), kt, 2), axis=1) * T.conv2d(Tensor(x), kt, 2))
            backward(tape, loss)
            return loss.data.copy(), kt.grad

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


GRAD_CASES = {
    "conv2d": (lambda x, k: T.conv2d(x, k, 2), [(2, 2, 7, 7), (3, 2, 3, 3)]),
    "conv2d_at": (lambda x, k: T.conv2d_at(x, k, 2, [3, 0], [[1, 2], [0]]), [(2, 2, 7, 7), (3, 2, 3, 3)]),
    "relu": (T.relu, [(4, 4)]),
    "softmax": (lambda x: T.softmax(x, axis=1), [(3, 4)]),
    "matvec_bank": (T.matvec_bank, [(3, 2, 4, 2), (5, 3, 2)]),
    "matmul": (T.matmul, [(2, 3, 4), (4, 5)]),
    "norm": (lambda x: T.norm(x, axis=-1), [(3, 4)]),
    "sigmoid": (T.sigmoid, [(3, 4)]),
    "div": (lambda a, b: a / (T.exp(b) + 1.0), [(3, 4), (4,)]),
    "patches": (lambda x: T.patches(x, 3, 3, 2, [0, 2, 3]), [(2, 2, 7, 7)]),
    "take_concat": (lambda x: T.concatenate([T.take(x, [2, 0], axis=1), x], axis=1), [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck(name, rng):
    fn, shapes = GRAD_CASES[name]
    inputs = [rng.standard_normal(s) for s in shapes]
    assert gradcheck(fn, inputs, samples=30) < 1e-3
