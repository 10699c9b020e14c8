import io
import math

import numpy as np
import pytest

import memroute.tensor as T
from memroute.errors import ConfigError, GraphError, NonFiniteError, ShapeError
from memroute.tensor import Tensor, mrt


def naive_matmul(a, b):
    n, m = a.shape
    m2, p = b.shape
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(m):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def naive_dwconv(x, k):
    B, C, H, W = x.shape
    _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros_like(x)
    for b in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            ii, jj = i + u - ph, j + v - pw
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += x[b, c, ii, jj] * k[c, u, v]
                    out[b, c, i, j] = acc
    return out


def naive_conv1d(x, k):
    L = len(x)
    p = len(k) // 2
    out = np.zeros(L)
    for i in range(L):
        for u in range(len(k)):
            j = i + u - p
            if 0 <= j < L:
                out[i] += x[j] * k[u]
    return out


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2, 3], [4, 5]]))
        np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])

    def test_hand_arithmetic(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        out = T.matmul(t64(a), t64(b)).data
        assert np.max(np.abs(out - naive_matmul(a, b))) < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_grad(self):
        rng = np.random.default_rng(1)
        b = t64(rng.normal(size=(4, 3)))
        err = T.grad_check(lambda a: T.sum(T.square(T.matmul(a, b))), t64(rng.normal(size=(2, 5, 4))))
        assert err < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_large_logit_f32(self):
        out = T.softmax(Tensor(np.array([1000.0, 0.0], dtype=np.float32))).data
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, [1.0, 0.0])

    def test_against_direct(self):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x) / np.exp(x).sum()
        assert np.max(np.abs(T.softmax(Tensor(x, dtype="f32")).data - ref)) < 1e-7

    @pytest.mark.parametrize("dtype,tol", [("f32", 1e-6), ("f64", 1e-12)])
    def test_rows_sum_to_one(self, dtype, tol):
        x = Tensor(np.random.default_rng(2).normal(scale=5, size=(7, 9)), dtype=dtype)
        assert np.max(np.abs(T.softmax(x, axis=-1).data.sum(-1) - 1)) < tol

    def test_log_softmax_symmetric(self):
        np.testing.assert_allclose(T.log_softmax(t64([0.0, 0.0])).data, [-math.log(2)] * 2, rtol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        x = t64(np.random.default_rng(3).normal(size=(4, 6)))
        assert np.max(np.abs(T.log_softmax(x).data - np.log(T.softmax(x).data))) < 1e-6
        assert np.max(np.abs(np.exp(T.log_softmax(x).data).sum(-1) - 1)) < 1e-6

    def test_log_softmax_oracle(self):
        x = np.array([5.0, 1.0])
        ref = x - math.log(math.exp(5.0) + math.exp(1.0))
        assert np.max(np.abs(T.log_softmax(Tensor(x, dtype="f32")).data - ref)) < 1e-6


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_already_normalised(self):
        out = T.layer_norm(t64([1.0, -1.0]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-12)

    def test_moments(self):
        x = t64(np.random.default_rng(4).normal(size=8) * 3 + 2)
        out = T.layer_norm(x, t64(np.ones(8)), t64(np.zeros(8))).data
        assert abs(out.mean()) < 1e-7
        assert abs(out.var() - 1) < 1e-5

    def test_rejects_wrong_width(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestConvolutions:
    def test_dw_identity(self):
        x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 4, 5)))
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1
        np.testing.assert_array_equal(T.depthwise_conv2d(x, Tensor(k)).data, x.data)

    def test_dw_box_sum_interior(self):
        x = Tensor(np.full((1, 1, 5, 5), 2.0))
        out = T.depthwise_conv2d(x, Tensor(np.ones((1, 3, 3)))).data
        np.testing.assert_array_equal(out[0, 0, 1:-1, 1:-1], 18.0)

    def test_dw_against_loop(self):
        rng = np.random.default_rng(6)
        x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 3, 3))
        out = T.depthwise_conv2d(Tensor(x, dtype="f32"), Tensor(k, dtype="f32")).data
        assert np.max(np.abs(out - naive_dwconv(x, k))) < 1e-5

    def test_dw_channel_separation(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 3, 4, 4))
        k = t64(rng.normal(size=(3, 3, 3)))
        base = T.depthwise_conv2d(t64(x), k).data
        x2 = x.copy()
        x2[0, 1] += rng.normal(size=(4, 4))
        moved = T.depthwise_conv2d(t64(x2), k).data
        np.testing.assert_array_equal(base[:, [0, 2]], moved[:, [0, 2]])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.depthwise_conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 2, 2))))
        with pytest.raises(ConfigError):
            T.conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones(2)))

    def test_conv1d_identity(self):
        x = Tensor(np.arange(6.0).reshape(1, 1, 6))
        np.testing.assert_array_equal(T.conv1d(x, Tensor([0.0, 1.0, 0.0])).data, x.data)

    def test_conv1d_hand(self):
        out = T.conv1d(Tensor(np.ones((1, 1, 4))), Tensor([1.0, 1.0, 1.0]))
        assert out.data.reshape(-1).tolist() == [2, 3, 3, 2]

    def test_conv1d_against_loop(self):
        rng = np.random.default_rng(8)
        x, k = rng.normal(size=16), rng.normal(size=5)
        out = T.conv1d(Tensor(x.reshape(1, 1, 16), dtype="f32"), Tensor(k, dtype="f32")).data
        assert np.max(np.abs(out.reshape(-1) - naive_conv1d(x, k))) < 1e-5


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = t64([1.0, 2.0, 3.0], grad=True)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_square_grad(self):
        x = t64([1.0, -2.0, 3.0], grad=True)
        T.backward(T.sum(x * x))
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_non_scalar_rejected(self):
        x = t64([1.0, 2.0], grad=True)
        with pytest.raises(GraphError):
            T.backward(x * 2.0)

    def test_detached_rejected(self):
        with pytest.raises(GraphError):
            T.backward(T.sum(t64([1.0, 2.0])))

    def test_second_backward_on_same_graph_rejected(self):
        x = t64([1.0, 2.0], grad=True)
        loss = T.sum(x * x)
        T.backward(loss)
        with pytest.raises(GraphError):
            T.backward(loss)

    def test_tape_is_topological(self):
        x = t64([1.0, 2.0], grad=True)
        y = T.exp(x)
        loss = T.sum(y * x + y)
        tape = T.backward(loss)
        pos = {id(t): i for i, t in enumerate(tape.tensors)}
        for t in tape.tensors:
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad:
                        assert pos[id(p)] < pos[id(t)]
        assert len({id(t) for t in tape.tensors}) == len(tape)

    def test_no_grad_records_nothing(self):
        x = t64([1.0], grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            T.log(t64([0.0]))

    def test_grad_dtype_matches(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        T.backward(T.sum(T.gelu(x)))
        assert x.grad.dtype == np.float32 and x.grad.shape == x.shape


class TestGradCheck:
    def test_polynomial(self):
        assert T.grad_check(lambda x: T.sum(x * x), t64([1.0, 2.0, 3.0])) < 1e-8

    def test_softmax_sum_of_squares(self):
        x = t64(np.random.default_rng(9).normal(size=6))
        assert T.grad_check(lambda x: T.sum(T.square(T.softmax(x))), x) < 1e-6

    def test_requires_f64(self):
        with pytest.raises(TypeError):
            T.grad_check(lambda x: T.sum(x), Tensor([1.0]))


def _rand(seed, shape):
    return t64(np.random.default_rng(seed).normal(size=shape))


# Each differentiable op: analytic vs central differences on a random 10-element input.
OP_CASES = {
    "add": lambda x: T.sum(T.square(x + _rand(1, (10,)))),
    "sub": lambda x: T.sum(T.square(_rand(1, (10,)) - x)),
    "mul": lambda x: T.sum(x * _rand(1, (10,)) * x),
    "div": lambda x: T.sum(_rand(1, (10,)) / (T.square(x) + 1.0)),
    "neg": lambda x: T.sum(T.square(-x) * _rand(2, (10,))),
    "exp": lambda x: T.sum(T.exp(x)),
    "sigmoid": lambda x: T.sum(T.sigmoid(x) * _rand(1, (10,))),
    "gelu": lambda x: T.sum(T.gelu(x) * _rand(1, (10,))),
    "softmax": lambda x: T.sum(T.softmax(T.reshape(x, (2, 5))) * _rand(1, (2, 5))),
    "log_softmax": lambda x: T.sum(T.log_softmax(T.reshape(x, (5, 2))) * _rand(1, (5, 2))),
    "layer_norm": lambda x: T.sum(
        T.layer_norm(T.reshape(x, (2, 5)), _rand(1, (5,)), _rand(2, (5,))) * _rand(3, (2, 5))),
    "mean_axis": lambda x: T.sum(T.square(T.mean(T.reshape(x, (2, 5)), axis=1))),
    "transpose": lambda x: T.sum(T.transpose(T.reshape(x, (2, 5))) * _rand(1, (5, 2))),
    "broadcast": lambda x: T.sum(T.broadcast_to(T.reshape(x, (1, 10)), (3, 10)) * _rand(1, (3, 10))),
    "concat_split": lambda x: T.sum(
        T.concat(T.split(x, [3, 7])[::-1], axis=0) * _rand(1, (10,))),
    "take_scatter": lambda x: T.sum(
        T.scatter(T.take(x, [4, 1, 7]), [0, 2, 9], size=10) * _rand(1, (10,))),
    "matmul": lambda x: T.sum(T.square(T.matmul(T.reshape(x, (2, 5)), _rand(1, (5, 3))))),
    "dwconv": lambda x: T.sum(
        T.depthwise_conv2d(T.reshape(x, (1, 1, 2, 5)), _rand(1, (1, 3, 3))) * _rand(2, (1, 1, 2, 5))),
    "conv1d": lambda x: T.sum(T.conv1d(T.reshape(x, (1, 1, 10)), _rand(1, (3,))) * _rand(2, (1, 1, 10))),
    "abs": lambda x: T.sum(T.abs(x) * _rand(1, (10,))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    x = _rand(100, (10,))
    assert T.grad_check(OP_CASES[name], x) < 1e-6


def test_kernel_gradients():
    rng = np.random.default_rng(11)
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    err = T.grad_check(lambda k: T.sum(T.square(T.depthwise_conv2d(x, k))), t64(rng.normal(size=(3, 3, 3))))
    assert err < 1e-6
    y = t64(rng.normal(size=(2, 1, 8)))
    assert T.grad_check(lambda k: T.sum(T.square(T.conv1d(y, k))), t64(rng.normal(size=5))) < 1e-6


class TestNaiveOracles:
    def test_elementwise(self):
        rng = np.random.default_rng(12)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(T.add(t64(a), t64(b)).data, a + b, atol=1e-12)
        np.testing.assert_allclose(T.mul(t64(a), t64(b)).data, a * b, atol=1e-12)
        sig = [[1 / (1 + math.exp(-v)) for v in row] for row in a]
        np.testing.assert_allclose(T.sigmoid(t64(a)).data, sig, atol=1e-12)
        gel = [[0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in row] for row in a]
        np.testing.assert_allclose(T.gelu(t64(a)).data, gel, atol=1e-12)

    def test_mean_concat_split(self):
        a = np.arange(12.0).reshape(3, 4)
        np.testing.assert_allclose(T.mean(t64(a), axis=0).data, [sum(a[:, j]) / 3 for j in range(4)])
        parts = T.split(t64(a), [1, 3], axis=1)
        assert parts[0].shape == (3, 1) and parts[1].shape == (3, 3)
        np.testing.assert_array_equal(T.concat(parts, axis=1).data, a)

    def test_gather_scatter(self):
        x = t64(np.arange(15.0).reshape(5, 3))
        g = T.take(x, [3, 0], axis=0)
        np.testing.assert_array_equal(g.data, [[9, 10, 11], [0, 1, 2]])
        s = T.scatter(g, [1, 4], axis=0, size=5)
        np.testing.assert_array_equal(s.data[1], [9, 10, 11])
        np.testing.assert_array_equal(s.data[[0, 2, 3]], 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_scatter_gather_permutation_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng.normal(size=(7, 2)))
        perm = rng.permutation(7)
        out = T.scatter(T.take(x, perm), perm, size=7)
        np.testing.assert_array_equal(out.data, x.data)

    def test_scatter_rejects_duplicates(self):
        with pytest.raises(IndexError):
            T.scatter(t64(np.ones((2, 1))), [1, 1], size=3)


class TestMRT:
    @pytest.mark.parametrize("dtype", ["f32", "f64"])
    def test_roundtrip_bit_exact(self, dtype, tmp_path):
        x = Tensor(np.random.default_rng(13).normal(size=(2, 3, 4)), dtype=dtype)
        path = tmp_path / "x.mrt"
        mrt.save(path, x)
        y = mrt.load(path)
        assert y.dtype == dtype and y.shape == x.shape
        assert y.data.tobytes() == x.data.tobytes()

    def test_header_layout(self):
        buf = mrt.dumps(Tensor(np.zeros((2, 3), dtype=np.float64)))
        assert buf[:4] == b"MRT1" and buf[4] == 1 and buf[5] == 2
        assert int.from_bytes(buf[6:14], "little") == 2
        assert int.from_bytes(buf[14:22], "little") == 3
        assert len(buf) == 22 + 6 * 8

    def test_scalar_roundtrip(self):
        y = mrt.load(io.BytesIO(mrt.dumps(Tensor(np.float32(2.5)))))
        assert y.shape == () and y.item() == 2.5

    def test_bad_magic(self):
        from memroute.errors import FormatError
        with pytest.raises(FormatError):
            mrt.loads(b"XXXX\x00\x00")
