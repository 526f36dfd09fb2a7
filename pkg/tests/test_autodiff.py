import numpy as np
import pytest

from activerecon import autodiff as ad
from conftest import central_difference, max_rel_err, nograd_scalar


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.constant([0.0])).item() == 0.5

    def test_tanh_at_zero(self):
        assert ad.tanh(ad.constant([0.0])).item() == 0.0

    def test_square_backward(self):
        x = ad.parameter([3.0])
        ad.backward(ad.square(x))
        assert x.grad[0] == pytest.approx(6.0)

    def test_shape_mismatch_names_both_shapes(self):
        a = ad.constant(np.zeros((2, 3)))
        b = ad.constant(np.zeros((3, 2)))
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(3, 2\)"):
            ad.add(a, b)

    def test_scalar_broadcast_allowed(self):
        a = ad.constant(np.ones((2, 2)))
        assert np.allclose(ad.sub(1.0, a).data, 0.0)
        assert np.allclose(ad.mul(a, 3.0).data, 3.0)

    def test_sigmoid_extreme_inputs_stable(self):
        x = ad.constant([-1000.0, 1000.0])
        out = ad.sigmoid(x).data
        assert out[0] == 0.0 and out[1] == 1.0


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 1))
        out = ad.matmul(ad.constant(np.eye(3)), ad.constant(x))
        assert np.allclose(out.data, x)

    def test_hand_product(self):
        out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_grad_of_sum_is_ones_times_bt(self, rng):
        a = ad.parameter(rng.standard_normal((3, 4)))
        b = ad.constant(rng.standard_normal((4, 2)))
        ad.backward(ad.tsum(ad.matmul(a, b)))
        expected = np.ones((3, 2)) @ b.data.T
        assert np.allclose(a.grad, expected)
        fd = central_difference(lambda: nograd_scalar(lambda: ad.tsum(ad.matmul(a, b))), a)
        assert max_rel_err(a.grad, fd) < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


class TestConv:
    def test_conv2d_1x1_identity(self, rng):
        x = rng.standard_normal((1, 4, 4))
        k = np.ones((1, 1, 1, 1))
        out = ad.conv2d(ad.constant(x), ad.constant(k), padding=0)
        assert np.allclose(out.data, x)

    def test_conv2d_box_filter_on_impulse(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        k = np.ones((1, 1, 3, 3))
        out = ad.conv2d(ad.constant(x), ad.constant(k), padding=1)
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0
        assert np.array_equal(out.data[0], expected)

    def test_conv2d_finite_difference(self, rng):
        x = ad.parameter(rng.standard_normal((1, 4, 4)))
        k = ad.parameter(rng.standard_normal((2, 1, 3, 3)))
        b = ad.parameter(rng.standard_normal(2))

        def loss():
            return ad.tmean(ad.square(ad.conv2d(x, k, b, padding=1)))

        ad.backward(loss())
        for p in (x, k, b):
            fd = central_difference(lambda: nograd_scalar(loss), p)
            assert max_rel_err(p.grad, fd) < 1e-5

    def test_conv3d_unit_kernel_identity(self, rng):
        x = rng.standard_normal((1, 3, 3, 3))
        k = np.ones((1, 1, 1, 1, 1))
        out = ad.conv3d(ad.constant(x), ad.constant(k))
        assert np.allclose(out.data, x)

    def test_conv3d_impulse_block(self):
        x = np.zeros((1, 5, 5, 5))
        x[0, 2, 2, 2] = 1.0
        k = np.ones((1, 1, 3, 3, 3))
        out = ad.conv3d(ad.constant(x), ad.constant(k), padding=1)
        assert out.data.sum() == 27.0
        assert np.all(out.data[0, 1:4, 1:4, 1:4] == 1.0)

    def test_conv3d_finite_difference(self, rng):
        x = ad.parameter(rng.standard_normal((1, 4, 4, 4)))
        k = ad.parameter(rng.standard_normal((2, 1, 3, 3, 3)))

        def loss():
            return ad.tmean(ad.square(ad.conv3d(x, k, padding=1)))

        ad.backward(loss())
        for p in (x, k):
            fd = central_difference(lambda: nograd_scalar(loss), p)
            assert max_rel_err(p.grad, fd) < 1e-5

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv2d(ad.constant(np.zeros((1, 4, 4))), ad.constant(np.zeros((1, 1, 2, 2))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ValueError, match="exceeds"):
            ad.conv2d(ad.constant(np.zeros((1, 2, 2))), ad.constant(np.zeros((1, 1, 5, 5))))

    def test_batched_matches_per_sample(self, rng):
        xb = rng.standard_normal((4, 2, 6, 6))
        k = ad.constant(rng.standard_normal((3, 2, 3, 3)))
        outb = ad.conv2d(ad.constant(xb), k, padding=1, stride=2)
        for i in range(4):
            single = ad.conv2d(ad.constant(xb[i]), k, padding=1, stride=2)
            assert np.allclose(outb.data[i], single.data)


class TestBackward:
    def test_constant_path_gives_zero_gradient(self):
        x = ad.parameter([2.0, 3.0])
        loss = ad.tsum(ad.mul(x, 0.0))
        ad.backward(loss)
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_accumulation_across_consumers(self):
        x = ad.parameter([5.0])
        ad.backward(ad.add(x, x))
        assert x.grad[0] == 2.0

    def test_composed_network_finite_difference(self, rng):
        w1 = ad.parameter(rng.standard_normal((3, 4)))
        w2 = ad.parameter(rng.standard_normal((4, 1)))
        x = ad.constant(rng.standard_normal((2, 3)))

        def loss():
            h = ad.tanh(ad.matmul(x, w1))
            return ad.tmean(ad.square(ad.sigmoid(ad.matmul(h, w2))))

        ad.backward(loss())
        for p in (w1, w2):
            fd = central_difference(lambda: nograd_scalar(loss), p)
            assert max_rel_err(p.grad, fd) < 1e-4

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter(np.ones(3))
        y = ad.mul(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(y)

    def test_empty_tape_rejected(self):
        with pytest.raises(RuntimeError, match="empty tape"):
            ad.backward(ad.constant([1.0]))

    def test_linearity_of_reverse_mode(self, rng):
        base = rng.standard_normal((2, 2))

        def grad_of(build):
            p = ad.parameter(base.copy())
            ad.backward(build(p))
            return p.grad

        la = lambda p: ad.tsum(ad.square(p))
        lb = lambda p: ad.tmean(ad.sigmoid(p))
        g_sum = grad_of(lambda p: ad.add(la(p), lb(p)))
        assert np.allclose(g_sum, grad_of(la) + grad_of(lb))

    def test_grad_accumulates_across_backward_calls(self):
        x = ad.parameter([1.0])
        ad.backward(ad.mul(x, 3.0))
        ad.backward(ad.mul(x, 4.0))
        assert x.grad[0] == 7.0

    def test_no_grad_suspends_recording(self):
        x = ad.parameter([1.0])
        with ad.no_grad():
            y = ad.mul(x, 2.0)
        assert not y.requires_grad
        with pytest.raises(RuntimeError):
            ad.backward(ad.tsum(y))


class TestXavier:
    def test_bound_for_equal_fans(self):
        t = ad.xavier_init((1000,), 3, 3, np.random.default_rng(0))
        assert np.all(t.data >= -1.0) and np.all(t.data <= 1.0)
        assert np.abs(t.data).max() > 0.9  # actually fills the range

    def test_variance_matches_uniform_law(self):
        fan_in, fan_out = 8, 24
        t = ad.xavier_init((100_000,), fan_in, fan_out, np.random.default_rng(1))
        expected = 2.0 / (fan_in + fan_out)
        assert abs(t.data.var() - expected) < 0.1 * expected

    def test_same_seed_is_deterministic(self):
        a = ad.xavier_init((4, 4), 4, 4, np.random.default_rng(7))
        b = ad.xavier_init((4, 4), 4, 4, np.random.default_rng(7))
        assert np.array_equal(a.data, b.data)

    def test_bad_fans_rejected(self):
        with pytest.raises(ValueError):
            ad.xavier_init((2,), 0, 3, np.random.default_rng(0))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = ad.parameter([1.0, 2.0])
        opt = ad.Adam([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.data, [1.0, 2.0])
        assert opt.t == 1

    def test_first_step_magnitude_is_learning_rate(self):
        p = ad.parameter([1.0])
        p.grad = np.array([0.37])
        opt = ad.Adam([p], lr=1e-3)
        opt.step()
        assert abs(1.0 - p.data[0]) == pytest.approx(1e-3, rel=1e-4)

    def test_two_runs_bit_identical(self, rng):
        data = rng.standard_normal(5)
        grads = [rng.standard_normal(5) for _ in range(4)]

        def run():
            p = ad.parameter(data.copy())
            opt = ad.Adam([p], lr=0.01)
            for g in grads:
                p.grad = g.copy()
                opt.step()
            return p.data.tobytes()

        assert run() == run()

    def test_non_finite_gradient_rejected(self):
        p = ad.parameter([1.0])
        p.grad = np.array([np.nan])
        opt = ad.Adam([p])
        with pytest.raises(FloatingPointError, match="non-finite"):
            opt.step()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        arrays = {
            "enc.w": rng.standard_normal((2, 3, 3)),
            "enc.b": np.zeros(3),
            "head.w": rng.standard_normal((1, 1)),
        }
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(path, arrays)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])

    def test_save_is_deterministic(self, tmp_path, rng):
        arrays = {"w": rng.standard_normal((4, 4))}
        ad.save_checkpoint(tmp_path / "a.ckpt", arrays)
        ad.save_checkpoint(tmp_path / "b.ckpt", arrays)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncated_payload_detected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        ad.save_checkpoint(path, {"w": np.ones(8)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(ad.CheckpointError, match="truncated|terminator"):
            ad.load_checkpoint(path)

    def test_bad_header_detected(self, tmp_path):
        path = tmp_path / "h.ckpt"
        path.write_bytes(b"NOPE 1\nw\n2\n16\n" + b"\0" * 16 + b"\n")
        with pytest.raises(ad.CheckpointError, match="header"):
            ad.load_checkpoint(path)
