"""Tensor engine: primitive semantics, backward sweeps, gradient checks."""

import numpy as np
import pytest

from helpers import Readout, rand_f32
from mspm import autodiff as ad
from mspm.autodiff import Tape, Tensor, backward
from mspm.errors import InvalidArgument, NoGraph
from mspm.gradcheck import grad_check


class TestConvShapes:
    def test_table_row_conv0(self):
        x = Tensor(np.zeros((1, 1, 64, 64), np.float32))
        w = Tensor(np.zeros((32, 1, 3, 3), np.float32))
        b = Tensor(np.zeros(32, np.float32))
        assert ad.conv2d(x, w, b, 1, 1, 1).shape == (1, 32, 64, 64)

    def test_table_row_conv2(self):
        x = Tensor(np.zeros((1, 32, 64, 64), np.float32))
        w = Tensor(np.zeros((64, 32, 3, 3), np.float32))
        b = Tensor(np.zeros(64, np.float32))
        assert ad.conv2d(x, w, b, 2, 1, 2).shape == (1, 64, 31, 31)

    def test_identity_kernel(self):
        x = Tensor(np.array([[[[3.5]]]], np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        y = ad.conv2d(x, w, b, 1, 0, 1)
        assert y.data[0, 0, 0, 0] == pytest.approx(3.5)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 3, 8, 8), np.float32))
        w = Tensor(np.zeros((4, 2, 3, 3), np.float32))
        b = Tensor(np.zeros(4, np.float32))
        with pytest.raises(InvalidArgument):
            ad.conv2d(x, w, b, 1, 1, 1)

    def test_collapsed_output(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        with pytest.raises(InvalidArgument):
            ad.conv2d(x, w, b, 1, 0, 3)

    def test_against_direct_correlation(self):
        rng = np.random.default_rng(5)
        x = rand_f32(rng, (2, 3, 9, 8))
        w = rand_f32(rng, (4, 3, 3, 3))
        b = rand_f32(rng, (4,))
        y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1, 1).data
        n, co, ho, wo = y.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for nn_ in range(n):
            for o in range(co):
                for i in range(ho):
                    for j in range(wo):
                        win = xp[nn_, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                        want = (win.astype(np.float64) * w[o]).sum() + b[o]
                        assert y[nn_, o, i, j] == pytest.approx(want, rel=1e-5)


class TestBatchNorm:
    def _run(self, x, gamma, beta, training=True):
        c = x.shape[1]
        rm = np.zeros(c, np.float32)
        rv = np.ones(c, np.float32)
        return ad.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv,
                              training=training)

    def test_constant_channel_zeroed(self):
        x = np.full((2, 3, 4, 4), 7.0, np.float32)
        y = self._run(x, np.ones(3, np.float32), np.zeros(3, np.float32))
        assert np.abs(y.data).max() < 1e-4

    def test_gamma_zero_gives_beta(self):
        rng = np.random.default_rng(0)
        x = rand_f32(rng, (2, 3, 4, 4))
        beta = np.array([1.5, -2.0, 0.25], np.float32)
        y = self._run(x, np.zeros(3, np.float32), beta)
        for c in range(3):
            assert np.allclose(y.data[:, c], beta[c])

    def test_output_mean_is_beta(self):
        rng = np.random.default_rng(1)
        x = rand_f32(rng, (2, 3, 4, 4), scale=2.0)
        beta = np.array([0.3, -0.7, 2.0], np.float32)
        y = self._run(x, np.ones(3, np.float32) * 1.7, beta)
        got = y.data.mean(axis=(0, 2, 3))
        assert np.abs(got - beta).max() < 1e-5

    def test_running_stats_track_batch(self):
        rng = np.random.default_rng(2)
        x = rand_f32(rng, (4, 2, 3, 3), scale=3.0) + 1.0
        rm = np.zeros(2, np.float32)
        rv = np.ones(2, np.float32)
        ad.batchnorm2d(Tensor(x), Tensor(np.ones(2, np.float32)),
                       Tensor(np.zeros(2, np.float32)), rm, rv, training=True)
        mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
        m = 4 * 3 * 3
        var = x.var(axis=(0, 2, 3), dtype=np.float64) * m / (m - 1)
        assert np.allclose(rm, 0.1 * mu, atol=1e-6)
        assert np.allclose(rv, 0.9 + 0.1 * var, rtol=1e-5)

    def test_eval_uses_running_stats(self):
        x = np.full((1, 1, 2, 2), 5.0, np.float32)
        rm = np.array([3.0], np.float32)
        rv = np.array([4.0], np.float32)
        y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(1, np.float32)),
                           Tensor(np.zeros(1, np.float32)), rm, rv, training=False)
        assert np.allclose(y.data, (5.0 - 3.0) / np.sqrt(4.0 + 1e-5), rtol=1e-6)

    def test_too_few_values(self):
        x = np.zeros((1, 2, 1, 1), np.float32)
        with pytest.raises(InvalidArgument):
            self._run(x, np.ones(2, np.float32), np.zeros(2, np.float32))


class TestAdaptivePool:
    def test_identity(self):
        rng = np.random.default_rng(3)
        x = rand_f32(rng, (1, 2, 5, 5))
        y = ad.adaptive_avg_pool2d(Tensor(x), 5, 5)
        assert np.allclose(y.data, x)

    def test_constant(self):
        x = np.ones((1, 1, 4, 4), np.float32)
        y = ad.adaptive_avg_pool2d(Tensor(x), 2, 2)
        assert np.allclose(y.data, 1.0)

    def test_brute_force_bins(self):
        rng = np.random.default_rng(4)
        x = rand_f32(rng, (1, 1, 29, 29))
        y = ad.adaptive_avg_pool2d(Tensor(x), 8, 8).data[0, 0]
        for i in range(8):
            for j in range(8):
                h0, h1 = (i * 29) // 8, -((-(i + 1) * 29) // 8)
                w0, w1 = (j * 29) // 8, -((-(j + 1) * 29) // 8)
                want = x[0, 0, h0:h1, w0:w1].astype(np.float64).mean()
                assert y[i, j] == pytest.approx(want, rel=1e-6)

    def test_out_of_range(self):
        x = Tensor(np.zeros((1, 1, 4, 4), np.float32))
        with pytest.raises(InvalidArgument):
            ad.adaptive_avg_pool2d(x, 5, 2)
        with pytest.raises(InvalidArgument):
            ad.adaptive_avg_pool2d(x, 0, 2)


class TestPrimitives:
    def test_l2_normalize_345(self):
        y = ad.l2_normalize(Tensor(np.array([3.0, 4.0], np.float32)))
        assert np.allclose(y.data, [0.6, 0.8], atol=1e-6)

    def test_l2_normalize_unit_norms(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rand_f32(rng, (6, 17))
            norms = np.linalg.norm(x, axis=-1)
            keep = norms > 1e-3
            y = ad.l2_normalize(Tensor(x))
            out_norms = np.linalg.norm(y.data, axis=-1)
            assert np.all(np.abs(out_norms[keep] - 1.0) <= 1e-5)

    def test_softmax_uniform(self):
        y = ad.softmax(Tensor(np.zeros(3, np.float32)), axis=-1)
        assert np.allclose(y.data, 1.0 / 3.0, atol=1e-7)

    def test_softmax_rows(self):
        rng = np.random.default_rng(1)
        x = rand_f32(rng, (4, 9), scale=3.0)
        y = ad.softmax(Tensor(x), axis=-1).data
        assert (y >= 0).all()
        assert np.abs(y.sum(axis=-1) - 1.0).max() <= 1e-6

    def test_softmax_axis_range(self):
        with pytest.raises(InvalidArgument):
            ad.softmax(Tensor(np.zeros((2, 2), np.float32)), axis=2)

    def test_layernorm_moments(self):
        rng = np.random.default_rng(2)
        x = rand_f32(rng, (5, 33), scale=4.0)
        y = ad.layernorm(Tensor(x), Tensor(np.ones(33, np.float32)),
                         Tensor(np.zeros(33, np.float32))).data
        assert np.abs(y.mean(axis=-1)).max() < 1e-5
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-3

    def test_concat_axis_error(self):
        t = Tensor(np.zeros((2, 2), np.float32))
        with pytest.raises(InvalidArgument):
            ad.concat([t, t], axis=5)

    def test_safe_sqrt_clamps(self):
        y = ad.safe_sqrt(Tensor(np.array([-1.0, 0.0, 4.0], np.float32)))
        assert np.allclose(y.data, [0.0, 0.0, 2.0])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
        with Tape():
            backward(ad.vsum(x))
        assert np.allclose(x.grad, 1.0)

    def test_sum_square_gives_2x(self):
        rng = np.random.default_rng(0)
        x = Tensor(rand_f32(rng, (4, 5)), requires_grad=True)
        with Tape():
            backward(ad.vsum(ad.mul(x, x)))
        assert np.allclose(x.grad, 2 * x.data, atol=1e-6)

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros(3, np.float32), requires_grad=True)
        with Tape():
            y = ad.mul(x, 2.0)
            with pytest.raises(InvalidArgument):
                backward(y)

    def test_detached_loss(self):
        x = Tensor(np.zeros((), np.float32), requires_grad=True)
        y = ad.mul(x, 2.0)  # no tape active
        with pytest.raises(NoGraph):
            backward(y)

    def test_tape_consumed(self):
        x = Tensor(np.ones(3, np.float32), requires_grad=True)
        with Tape():
            loss = ad.vsum(x)
            backward(loss)
            with pytest.raises(NoGraph):
                backward(loss)

    def test_grad_accumulates(self):
        x = Tensor(np.ones(3, np.float32), requires_grad=True)
        for _ in range(2):
            with Tape():
                backward(ad.vsum(x))
        assert np.allclose(x.grad, 2.0)

    def test_index_select_accumulates_duplicates(self):
        x = Tensor(np.eye(3, dtype=np.float32), requires_grad=True)
        with Tape():
            y = ad.index_select(x, np.array([1, 1, 0]))
            backward(ad.vsum(y))
        assert np.allclose(x.grad.sum(axis=1), [3, 6, 0])


class TestDeterminism:
    def test_forward_backward_bitwise(self):
        def run():
            rng = np.random.default_rng(77)
            x = Tensor(rand_f32(rng, (2, 3, 8, 8)), requires_grad=True)
            w = Tensor(rand_f32(rng, (4, 3, 3, 3)), requires_grad=True)
            b = Tensor(rand_f32(rng, (4,)), requires_grad=True)
            with Tape():
                y = ad.relu(ad.conv2d(x, w, b, 1, 1, 1))
                p = ad.adaptive_avg_pool2d(y, 2, 2)
                loss = ad.vsum(ad.mul(p, p))
                backward(loss)
            return y.data.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


class TestGradChecks:
    def test_sum_exact(self):
        # dyadic values and step keep every float32 quantity exact
        rep = grad_check(lambda t: ad.vsum(t), [np.ones((3, 3), np.float32)],
                         step=2.0 ** -10)
        assert rep.max_rel_err == 0.0

    def test_conv(self):
        rng = np.random.default_rng(0)
        x = rand_f32(rng, (1, 2, 5, 5))
        w = rand_f32(rng, (3, 2, 3, 3), scale=0.5)
        b = rand_f32(rng, (3,))
        probe = Readout(9)

        def f(xi, wi, bi):
            return probe(ad.conv2d(xi, wi, bi, 1, 1, 1))

        rep = grad_check(f, [x, w, b])
        assert rep.passed, str(rep)

    @pytest.mark.parametrize("seed", range(5))
    def test_primitive_sweep(self, seed):
        rng = np.random.default_rng(seed)
        bmat = Tensor(rand_f32(rng, (5, 4)))
        ops = {
            "relu": (lambda t: ad.relu(t),
                     # inputs bounded away from the kink
                     np.sign(rng.normal(size=(4, 5))).astype(np.float32)
                     * rng.uniform(0.2, 1.5, (4, 5)).astype(np.float32)),
            "softmax": (lambda t: ad.softmax(t, axis=-1), rand_f32(rng, (3, 7))),
            "l2norm": (lambda t: ad.l2_normalize(t), rand_f32(rng, (4, 6)) + 0.3),
            "layernorm": (lambda t: ad.layernorm(t, Tensor(np.ones(6, np.float32)),
                                                 Tensor(np.zeros(6, np.float32))),
                          rand_f32(rng, (3, 6), scale=2.0)),
            "pool": (lambda t: ad.adaptive_avg_pool2d(t, 3, 2), rand_f32(rng, (2, 2, 7, 5))),
            "matmul": (lambda t: ad.matmul(t, Tensor(rand_f32(rng, (5, 4)))),
                       rand_f32(rng, (3, 5))),
            "sqrt": (lambda t: ad.safe_sqrt(t),
                     rng.uniform(0.5, 4.0, (4, 4)).astype(np.float32)),
            "bn": (lambda t: ad.batchnorm2d(t, Tensor(np.ones(2, np.float32) * 1.3),
                                            Tensor(np.zeros(2, np.float32)),
                                            np.zeros(2, np.float32),
                                            np.ones(2, np.float32), training=True),
                   rand_f32(rng, (2, 2, 3, 3), scale=2.0)),
        }
        for name, (op, x) in ops.items():
            probe = Readout(1000 + seed)
            rep = grad_check(lambda t: probe(op(t)), [x])
            assert rep.passed, f"{name}: {rep}"
