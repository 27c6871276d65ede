import math

import numpy as np
import numpy.testing as npt
import pytest

from signflow.errors import DimensionError, InputError, ParseError, UsageError
from signflow.tensor import (Parameter, Tensor, add, concat, conv2d, conv3d,
                             global_avg_pool, grad_check, load_weights, matmul, mul,
                             narrow, relu, reshape, save_weights, sigmoid, softmax,
                             softmax_cross_entropy, tsum)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def naive_conv2d(x, w, stride=1, pad=0, bias=None):
    """Six-loop reference; taps accumulate in (c, kh, kw) order."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for o in range(co):
            for a in range(oh):
                for b in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, ci, a * stride + i, b * stride + j] * w[o, ci, i, j]
                    out[ni, o, a, b] = acc
    if bias is not None:
        out = out + bias.reshape(1, co, 1, 1)
    return out


class TestMatmul:
    def test_identity(self):
        a = np.arange(9, dtype=np.float64).reshape(3, 3)
        npt.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).numpy(), a)

    def test_zero(self):
        out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4)))).numpy()
        npt.assert_array_equal(out, np.zeros((2, 4)))

    def test_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        expected = naive_matmul(a, b)
        npt.assert_array_equal(expected, [[17.0], [39.0]])
        npt.assert_allclose(matmul(Tensor(a), Tensor(b)).numpy(), expected, rtol=1e-15)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestConv2d:
    def test_one_by_one_identity(self):
        x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        npt.assert_array_equal(conv2d(Tensor(x), Tensor(w)).numpy(), x)

    def test_zero_input(self):
        w = np.random.default_rng(1).uniform(-1, 1, (4, 2, 3, 3))
        out = conv2d(Tensor(np.zeros((1, 2, 6, 6))), Tensor(w), pad=1).numpy()
        npt.assert_array_equal(out, np.zeros((1, 4, 6, 6)))

    def test_constant_input_interior_9c(self):
        c_val = 0.7
        x = np.full((1, 1, 6, 6), c_val)
        w = np.ones((1, 1, 3, 3))
        got = conv2d(Tensor(x), Tensor(w), pad=1).numpy()
        expected = naive_conv2d(x, w, pad=1)
        npt.assert_array_equal(got, expected)
        npt.assert_allclose(got[0, 0, 1:-1, 1:-1], 9 * c_val, rtol=1e-12)

    @pytest.mark.parametrize("shape,co,k,stride,pad", [
        ((1, 1, 4, 4), 2, 3, 1, 1),
        ((2, 3, 8, 8), 4, 3, 1, 1),
        ((2, 3, 8, 8), 4, 3, 2, 1),
        ((2, 2, 7, 5), 3, 3, 2, 0),
        ((1, 3, 8, 8), 2, 1, 1, 0),
    ])
    def test_exact_mode_matches_naive_bitwise(self, shape, co, k, stride, pad):
        rng = np.random.default_rng(hash((shape, co, k, stride, pad)) % 2**32)
        x = rng.uniform(-1, 1, shape)
        w = rng.uniform(-1, 1, (co, shape[1], k, k))
        b = rng.uniform(-1, 1, co)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad,
                     mode="exact").numpy()
        npt.assert_array_equal(got, naive_conv2d(x, w, stride, pad, b))

    def test_fast_mode_close_to_exact(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
        w = rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32)
        fast = conv2d(Tensor(x), Tensor(w), stride=1, pad=1, mode="fast").numpy()
        exact = conv2d(Tensor(x), Tensor(w), stride=1, pad=1, mode="exact").numpy()
        npt.assert_allclose(fast, exact, atol=1e-5)

    def test_auto_mode_picks_exact_for_float64(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (1, 2, 5, 5))
        w = rng.uniform(-1, 1, (2, 2, 3, 3))
        auto = conv2d(Tensor(x), Tensor(w), pad=1).numpy()
        npt.assert_array_equal(auto, naive_conv2d(x, w, 1, 1))

    def test_empty_output_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestGlobalAvgPool:
    def test_constant(self):
        out = global_avg_pool(Tensor(np.full((2, 3, 4, 4), 0.25))).numpy()
        npt.assert_allclose(out, 0.25)

    def test_1x1_identity(self):
        x = np.random.default_rng(2).uniform(-1, 1, (3, 5, 1, 1))
        npt.assert_array_equal(global_avg_pool(Tensor(x)).numpy(), x[:, :, 0, 0])

    def test_mean_oracle(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0] = [[1, 2], [3, 4]]
        assert global_avg_pool(Tensor(x)).numpy()[0, 0] == pytest.approx(2.5)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_ln_k(self):
        for k in (2, 5, 10):
            loss = softmax_cross_entropy(Tensor(np.zeros((3, k))), [0, 1, k - 1])
            assert loss.item() == pytest.approx(math.log(k), rel=1e-12)

    def test_saturated_logit(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1000.0
        assert softmax_cross_entropy(Tensor(logits), [2]).item() <= 1e-6

    def test_closed_form(self):
        loss = softmax_cross_entropy(Tensor(np.array([[1.0, 2.0]])), [1])
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-12)
        assert loss.item() == pytest.approx(0.31326168751822286, rel=1e-10)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        p = softmax(rng.uniform(-5, 5, (20, 7)))
        npt.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.uniform(-2, 2, (6, 5)), requires_grad=True)
        # route through an op so logits is a graph node
        doubled = mul(logits, 1.0)
        loss = softmax_cross_entropy(doubled, rng.integers(0, 5, 6))
        loss.backward()
        npt.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-10)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 4)), requires_grad=True)
        tsum(x).backward()
        npt.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_dead_relu_gives_zeros(self):
        x = Tensor(-np.abs(np.random.default_rng(1).uniform(0.1, 1, (3, 4))),
                   requires_grad=True)
        tsum(relu(x)).backward()
        npt.assert_array_equal(x.grad, np.zeros((3, 4)))

    def test_grad_zeroed_per_pass(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        tsum(x).backward()
        tsum(mul(x, 3.0)).backward()
        npt.assert_array_equal(x.grad, np.full((2, 2), 3.0))

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tsum(x)
        loss.backward()
        with pytest.raises(UsageError):
            loss.backward()

    def test_backward_on_untracked_rejected(self):
        with pytest.raises(UsageError):
            Tensor(np.ones(1)).backward()

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            mul(x, 2.0).backward()


class TestGradCheck:
    def test_linear_exact(self):
        err = grad_check(lambda t: tsum(mul(t, 3.0)), np.ones((2, 3)))
        assert err <= 1e-9

    def test_quadratic(self):
        err = grad_check(lambda t: tsum(mul(t, t)), np.ones(4), eps=1e-5)
        assert err <= 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_all_ops_random_inputs(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (2, 2, 5, 5))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, 3)
        wm = Tensor(rng.uniform(-1, 1, (4, 2)))
        checks = [
            grad_check(lambda t: conv2d(t, Tensor(w), Tensor(b), stride=2, pad=1).sum(), x),
            grad_check(lambda t: conv2d(Tensor(x), t, stride=2, pad=1).sum(), w),
            grad_check(lambda t: global_avg_pool(t).sum(), x),
            grad_check(lambda t: sigmoid(t).sum(), rng.uniform(-1, 1, (3, 4))),
            grad_check(lambda t: matmul(t, wm).sum(), rng.uniform(-1, 1, (3, 4))),
            grad_check(lambda t: softmax_cross_entropy(t, [1, 0]),
                       rng.uniform(-1, 1, (2, 4))),
        ]
        assert max(checks) <= 1e-4

    def test_conv3d_gradients(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, (1, 1, 3, 4, 4))
        w = rng.uniform(-1, 1, (2, 1, 3, 3, 3))
        assert grad_check(lambda t: conv3d(t, Tensor(w), pad=1).sum(), x) <= 1e-6
        assert grad_check(lambda t: conv3d(Tensor(x), t, pad=1).sum(), w) <= 1e-6


class TestShapeOps:
    def test_reshape_conserves_elements(self):
        x = Tensor(np.arange(24.0))
        y = reshape(x, 2, 3, 4)
        assert y.size == 24
        with pytest.raises(Exception):
            reshape(x, 5, 5)

    def test_narrow_concat_roundtrip(self):
        x = np.random.default_rng(7).uniform(-1, 1, (2, 6, 3))
        t = Tensor(x)
        back = concat([narrow(t, 1, 0, 2), narrow(t, 1, 2, 4)], axis=1)
        npt.assert_array_equal(back.numpy(), x)

    def test_narrow_backward_scatters(self):
        x = Tensor(np.ones((2, 4)), requires_grad=True)
        tsum(narrow(x, 1, 1, 2)).backward()
        npt.assert_array_equal(x.grad, [[0, 1, 1, 0], [0, 1, 1, 0]])

    def test_broadcast_add_backward(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        tsum(add(x, b)).backward()
        npt.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
        npt.assert_array_equal(x.grad, np.ones((2, 3)))


class TestWeightStore:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        tensors = {
            "stem.w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
            "head.b": rng.standard_normal(10).astype(np.float32),
            "名字": rng.standard_normal((2, 2)).astype(np.float32),  # UTF-8 names
            "scalar": np.float32(3.25).reshape(()),
        }
        path = tmp_path / "w.sgnf"
        save_weights(path, tensors)
        loaded = load_weights(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            npt.assert_array_equal(loaded[name], tensors[name])
            assert loaded[name].dtype == np.float32
        # second save of the loaded dict is byte-identical
        path2 = tmp_path / "w2.sgnf"
        save_weights(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_magic_checked(self, tmp_path):
        bad = tmp_path / "bad.sgnf"
        bad.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(ParseError, match="magic"):
            load_weights(bad)

    def test_float64_saved_as_float32(self, tmp_path):
        path = tmp_path / "w.sgnf"
        save_weights(path, {"x": np.array([1.0, 2.5], dtype=np.float64)})
        out = load_weights(path)["x"]
        assert out.dtype == np.float32
        npt.assert_array_equal(out, np.array([1.0, 2.5], dtype=np.float32))


class TestParameter:
    def test_named_and_requires_grad(self):
        p = Parameter(np.zeros((2, 2)), "w")
        assert p.requires_grad and p.name == "w"
        assert p.grad is None
