import numpy as np
import pytest

from smrnet import layers as L
from smrnet import tensor as T
from smrnet.tensor import ShapeError, Tensor, grad_check

from oracles import naive_conv


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


CONV_CASES = [
    # (n, cin, cout, size, kernel, stride, pad, dilation)
    (1, 1, 1, 5, 3, 1, 0, 1), (2, 3, 4, 8, 3, 1, 1, 1), (1, 2, 3, 9, 3, 2, 1, 1),
    (1, 2, 2, 10, 3, 1, 2, 2), (2, 1, 3, 12, 3, 1, 4, 4), (1, 3, 2, 11, 5, 2, 2, 1),
    (1, 2, 2, 7, 1, 1, 0, 1), (1, 2, 3, 13, 3, 2, 4, 4), (2, 2, 2, 9, 3, 1, 2, 2),
    (1, 4, 2, 8, 7, 1, 3, 1), (1, 1, 2, 6, 3, 3, 1, 1), (1, 2, 1, 14, 3, 1, 0, 4),
    (1, 3, 3, 10, 5, 1, 4, 2), (2, 2, 3, 8, 3, 2, 2, 2), (1, 1, 1, 16, 3, 2, 4, 4),
    (1, 2, 4, 5, 5, 1, 2, 1), (1, 3, 1, 9, 1, 2, 0, 1), (1, 2, 2, 12, 3, 1, 2, 2),
    (1, 1, 3, 11, 3, 1, 4, 4), (2, 3, 2, 7, 3, 1, 1, 1),
]


class TestConv:
    def test_output_size(self):
        assert L.conv_output_size(32, 3, 2, 1, 1) == 16
        assert L.conv_output_size(10, 3, 1, 2, 2) == 10

    def test_single_channel_box_filter(self):
        x = t64(np.arange(25).reshape(1, 1, 5, 5))
        w = t64(np.ones((1, 1, 3, 3)))
        assert L.conv2d(x, w).data[0, 0, 0, 0] == 54.0

    def test_dilated_taps(self):
        x = t64(np.arange(49).reshape(1, 1, 7, 7))
        w = t64(np.ones((1, 1, 3, 3)))
        out = L.conv2d(x, w, dilation=2).data
        assert out.shape == (1, 1, 3, 3)
        assert out[0, 0, 0, 0] == sum(x.data[0, 0, r, c] for r in (0, 2, 4) for c in (0, 2, 4))

    @pytest.mark.parametrize("case", CONV_CASES)
    @pytest.mark.parametrize("method", ["im2col", "direct"])
    def test_matches_naive_loop(self, case, method):
        n, cin, cout, size, k, s, p, d = case
        rng = np.random.default_rng(hash(case) % 2**32)
        x = rng.standard_normal((n, cin, size, size))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        got = L.conv2d(t64(x), t64(w), t64(b), s, p, d, method=method).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, s, p, d), atol=1e-6, rtol=0)

    def test_im2col_equals_direct(self):
        rng = np.random.default_rng(0)
        x, w = t64(rng.standard_normal((2, 3, 9, 9))), t64(rng.standard_normal((4, 3, 3, 3)))
        a = L.conv2d(x, w, stride=2, padding=2, dilation=2).data
        b = L.conv2d(x, w, stride=2, padding=2, dilation=2, method="direct").data
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            L.conv2d(t64(np.ones((1, 2, 5, 5))), t64(np.ones((1, 3, 3, 3))))

    def test_empty_output_rejected(self):
        with pytest.raises(ShapeError):
            L.conv2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 5, 5))))

    @pytest.mark.parametrize("shape,s,p,d", [((1, 2, 6, 6), 1, 1, 1), ((2, 1, 9, 7), 2, 2, 2),
                                              ((1, 2, 11, 11), 1, 4, 4)])
    def test_gradients(self, shape, s, p, d):
        rng = np.random.default_rng(1)
        w = t64(rng.standard_normal((3, shape[1], 3, 3)), True)
        b = t64(rng.standard_normal(3), True)
        x = t64(rng.standard_normal(shape))
        assert grad_check(lambda t: L.conv2d(t, w, b, s, p, d), x, params=[w, b]) <= 1e-4


class TestPool:
    def test_max_2x2(self):
        x = t64(np.array([[1, 2], [3, 4]]).reshape(1, 1, 2, 2))
        assert L.pool2d("max", x, 2).data.reshape(-1).tolist() == [4]

    def test_avg_2x2(self):
        x = t64(np.array([[1, 2], [3, 4]]).reshape(1, 1, 2, 2))
        assert L.pool2d("avg", x, 2).data.reshape(-1).tolist() == [2.5]

    def test_max_tie_gradient_to_first(self):
        x = t64(np.full((1, 1, 2, 2), 7.0), True)
        T.sum_all(L.pool2d("max", x, 2)).backward()
        assert x.grad.reshape(-1).tolist() == [1, 0, 0, 0]

    def test_max_padding_ignores_pad(self):
        x = t64(-np.ones((1, 1, 4, 4)))
        assert np.all(L.pool2d("max", x, 3, 2, 1).data == -1)

    def test_global(self):
        x = t64(np.arange(8.0).reshape(1, 2, 2, 2))
        assert L.global_pool("avg", x).data.reshape(-1).tolist() == [1.5, 5.5]
        assert L.global_pool("max", x).data.reshape(-1).tolist() == [3, 7]

    @pytest.mark.parametrize("kind", ["max", "avg"])
    @pytest.mark.parametrize("shape,win,stride,pad", [((1, 2, 6, 6), 2, 2, 0), ((2, 1, 7, 7), 3, 2, 1),
                                                      ((1, 1, 8, 5), 3, 1, 1)])
    def test_gradients(self, kind, shape, win, stride, pad):
        x = t64(np.random.default_rng(2).standard_normal(shape))
        assert grad_check(lambda t: L.pool2d(kind, t, win, stride, pad), x) <= 1e-4


class TestBatchNorm:
    def test_normalises_batch(self):
        bn = L.BatchNorm2d(3).to(np.float64)
        x = t64(np.random.default_rng(3).standard_normal((4, 3, 5, 5)) * 3 + 2)
        out = bn(x).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_running_stats_unbiased(self):
        bn = L.BatchNorm2d(1, momentum=1.0).to(np.float64)
        x = np.random.default_rng(4).standard_normal((2, 1, 3, 3))
        bn(t64(x))
        assert bn.buffers["running_var"][0] == pytest.approx(x.var(ddof=1))
        assert bn.buffers["running_mean"][0] == pytest.approx(x.mean())

    def test_eval_uses_running_stats(self):
        bn = L.BatchNorm2d(2).to(np.float64).eval()
        x = t64(np.random.default_rng(5).standard_normal((1, 2, 3, 3)))
        np.testing.assert_allclose(bn(x).data, x.data / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_training_batch_of_one_rejected(self):
        bn = L.BatchNorm2d(2)
        with pytest.raises(ShapeError):
            bn(Tensor(np.ones((1, 2, 3, 3), dtype=np.float32)))

    @pytest.mark.parametrize("shape", [(2, 2, 3, 3), (3, 1, 4, 2), (2, 3, 2, 2)])
    def test_gradients(self, shape):
        rng = np.random.default_rng(6)
        bn = L.BatchNorm2d(shape[1]).to(np.float64)
        bn.gamma.data = rng.standard_normal(shape[1]) + 1
        bn.beta.data = rng.standard_normal(shape[1])
        x = t64(rng.standard_normal(shape))
        assert grad_check(lambda t: bn(t), x, params=[bn.gamma, bn.beta]) <= 1e-4


class TestLinearAndUpsample:
    def test_linear_value(self):
        out = L.linear(t64([[1.0, 2.0]]), t64([[1.0, 1.0], [2.0, -1.0]]), t64([0.5, 0.0]))
        assert out.data.tolist() == [[3.5, 0.0]]

    @pytest.mark.parametrize("n,i,o", [(1, 3, 2), (4, 5, 3), (2, 7, 7)])
    def test_linear_gradients(self, n, i, o):
        rng = np.random.default_rng(7)
        lin = L.Linear(i, o).to(np.float64)
        L.init_params(lin, rng)
        lin.bias.data = rng.standard_normal(o)
        assert grad_check(lambda t: lin(t), t64(rng.standard_normal((n, i))),
                          params=lin.parameters()) <= 1e-4

    def test_upsample_repeats(self):
        x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = L.upsample_nearest(x, 2).data[0, 0]
        assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]

    @pytest.mark.parametrize("factor", [1, 2, 4])
    def test_upsample_gradients(self, factor):
        x = t64(np.random.default_rng(8).standard_normal((1, 2, 3, 2)))
        assert grad_check(lambda t: L.upsample_nearest(t, factor), x) <= 1e-4


class TestModule:
    def test_state_roundtrip(self):
        a = L.Conv2d(2, 3, 3, padding=1)
        L.init_params(a, np.random.default_rng(0))
        b = L.Conv2d(2, 3, 3, padding=1)
        b.load_state(a.state())
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_load_state_rejects_wrong_shape(self):
        a = L.Conv2d(2, 3, 3)
        state = a.state()
        state["weight"] = np.zeros((1, 1, 1, 1), dtype=np.float32)
        with pytest.raises((ShapeError, ValueError, KeyError)):
            a.load_state(state)

    def test_param_count(self):
        assert L.Conv2d(3, 8, 3).num_parameters() == 8 * 3 * 9 + 8
        assert L.Linear(4, 5).num_parameters() == 25

    def test_init_he_scale(self):
        conv = L.Conv2d(64, 64, 3)
        L.init_params(conv, np.random.default_rng(0))
        assert conv.weight.data.std() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.05)
        assert np.all(conv.bias.data == 0)
