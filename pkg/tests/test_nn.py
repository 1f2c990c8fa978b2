import math

import numpy as np
import pytest

from scribbleseg.errors import FormatError, ValidationError
from scribbleseg.nn import (
    BatchNorm,
    Conv3d,
    CosineSchedule,
    Dense,
    StepSchedule,
    checkpoint_bytes,
    checkpoint_from_bytes,
    dropout_mask,
    log_softmax,
    log_softmax_backward,
    read_checkpoint,
    relu,
    relu_backward,
    sgd_step,
    softmax,
    write_checkpoint,
)

H = 1e-3
REL_TOL = 1e-4


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-10)
    return np.abs(a - b).max() / scale


def fd_grad(param, scalar_fn, h=H):
    """Central finite differences of scalar_fn w.r.t. param (mutated in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = param[i]
        param[i] = orig + h
        fp = scalar_fn()
        param[i] = orig - h
        fm = scalar_fn()
        param[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def conv3d_naive(x, w, b):
    """Direct six-nested-loop valid cross-correlation."""
    bs, c, nz, ny, nx = x.shape
    o, _, k, _, _ = w.shape
    out = np.zeros((bs, o, nz - k + 1, ny - k + 1, nx - k + 1))
    for bi in range(bs):
        for oi in range(o):
            for z in range(nz - k + 1):
                for y in range(ny - k + 1):
                    for xx in range(nx - k + 1):
                        acc = float(b[oi])
                        for ci in range(c):
                            for dz in range(k):
                                for dy in range(k):
                                    for dx in range(k):
                                        acc += w[oi, ci, dz, dy, dx] * x[bi, ci, z + dz, y + dy, xx + dx]
                        out[bi, oi, z, y, xx] = acc
    return out


class TestConvForward:
    def test_identity_mixing_k1(self, rng):
        conv = Conv3d(3, 3, 1, rng=rng, dtype=np.float64)
        conv.weights[:] = np.eye(3).reshape(3, 3, 1, 1, 1)
        conv.bias[:] = 0
        x = rng.standard_normal((2, 3, 4, 4, 4))
        assert np.allclose(conv.forward(x), x)

    def test_zero_weights_constant_bias(self, rng):
        conv = Conv3d(1, 2, 3, rng=rng, dtype=np.float64)
        conv.weights[:] = 0
        conv.bias[:] = (1.5, -2.0)
        out = conv.forward(rng.standard_normal((1, 1, 5, 5, 5)))
        assert np.allclose(out[0, 0], 1.5) and np.allclose(out[0, 1], -2.0)

    def test_matches_naive_summation(self, rng):
        conv = Conv3d(1, 2, 3, rng=rng, dtype=np.float64)
        x = rng.standard_normal((1, 1, 5, 5, 5))
        expected = conv3d_naive(x, conv.weights, conv.bias)
        assert rel_err(conv.forward(x), expected) < 1e-6

    def test_same_padding_matches_valid_on_interior(self, rng):
        k = 3
        conv_same = Conv3d(1, 2, k, padding="same", rng=rng, dtype=np.float64)
        conv_valid = Conv3d(1, 2, k, padding="valid", dtype=np.float64)
        conv_valid.weights = conv_same.weights
        conv_valid.bias = conv_same.bias
        x = rng.standard_normal((1, 1, 6, 6, 6))
        full = conv_same.forward(x)
        inner = conv_valid.forward(x)
        p = (k - 1) // 2
        assert np.allclose(full[:, :, p:-p, p:-p, p:-p], inner)

    def test_even_kernel_same_rejected(self):
        with pytest.raises(ValidationError):
            Conv3d(1, 1, 2, padding="same")

    def test_too_small_input_rejected(self, rng):
        conv = Conv3d(1, 1, 5, rng=rng)
        with pytest.raises(ValidationError):
            conv.forward(np.zeros((1, 1, 4, 4, 4), dtype=np.float32))


class TestConvBackward:
    def test_zero_grad_out(self, rng):
        conv = Conv3d(1, 2, 3, rng=rng, dtype=np.float64)
        x = rng.standard_normal((1, 1, 4, 4, 4))
        gx, gw, gb = conv.backward(x, np.zeros((1, 2, 2, 2, 2)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_single_voxel_k1_scalar_chain_rule(self, rng):
        conv = Conv3d(1, 1, 1, rng=rng, dtype=np.float64)
        x = np.array([3.0]).reshape(1, 1, 1, 1, 1)
        g = np.array([2.0]).reshape(1, 1, 1, 1, 1)
        gx, gw, gb = conv.backward(x, g)
        assert gw.item() == pytest.approx(2.0 * 3.0)
        assert gx.item() == pytest.approx(2.0 * conv.weights.item())
        assert gb.item() == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_gradients_match_finite_differences(self, seed, padding):
        gen = np.random.default_rng(seed)
        conv = Conv3d(2, 2, 3, padding=padding, rng=gen, dtype=np.float64)
        x = gen.standard_normal((2, 2, 4, 4, 4))
        proj = gen.standard_normal(conv.forward(x).shape)

        def loss():
            return float((conv.forward(x) * proj).sum())

        gx, gw, gb = conv.backward(x, proj)
        assert rel_err(gx, fd_grad(x, loss)) < REL_TOL
        assert rel_err(gw, fd_grad(conv.weights, loss)) < REL_TOL
        assert rel_err(gb, fd_grad(conv.bias, loss)) < REL_TOL


class TestBatchNorm:
    def test_constant_batch_maps_to_beta(self):
        bn = BatchNorm(3, dtype=np.float64)
        bn.beta[:] = (1.0, 2.0, 3.0)
        x = np.full((8, 3), 5.0)
        out = bn.forward(x, train=True)
        assert np.allclose(out, np.broadcast_to((1.0, 2.0, 3.0), (8, 3)))

    def test_train_normalizes_batch(self, rng):
        bn = BatchNorm(4, dtype=np.float64)
        x = rng.standard_normal((64, 4)) * 3 + 7
        out = bn.forward(x, train=True)
        assert np.allclose(out.mean(axis=0), 0, atol=1e-9)
        assert np.allclose(out.std(axis=0), 1, atol=1e-2)

    def test_running_stats_track_batches(self, rng):
        bn = BatchNorm(2, dtype=np.float64)
        x = rng.standard_normal((32, 2)) + 4.0
        for _ in range(200):
            bn.forward(x, train=True)
        assert np.allclose(bn.running_mean, x.mean(axis=0), atol=1e-3)
        out = bn.forward(x, train=False)
        assert np.allclose(out.mean(axis=0), 0, atol=1e-2)

    @pytest.mark.parametrize("seed", range(10))
    def test_train_gradients_match_finite_differences(self, seed):
        gen = np.random.default_rng(seed)
        bn = BatchNorm(3, dtype=np.float64)
        bn.gamma[:] = gen.standard_normal(3)
        bn.beta[:] = gen.standard_normal(3)
        x = gen.standard_normal((6, 3))
        proj = gen.standard_normal((6, 3))

        def loss():
            running = (bn.running_mean.copy(), bn.running_var.copy())
            value = float((bn.forward(x, train=True) * proj).sum())
            bn.running_mean[:], bn.running_var[:] = running  # keep f() pure
            return value

        gx, ggamma, gbeta = bn.backward(x, proj, train=True)
        assert rel_err(gx, fd_grad(x, loss)) < REL_TOL
        assert rel_err(ggamma, fd_grad(bn.gamma, loss)) < REL_TOL
        assert rel_err(gbeta, fd_grad(bn.beta, loss)) < REL_TOL

    def test_eval_gradients_match_finite_differences(self, rng):
        bn = BatchNorm(3, dtype=np.float64)
        bn.running_mean[:] = rng.standard_normal(3)
        bn.running_var[:] = rng.random(3) + 0.5
        x = rng.standard_normal((5, 3))
        proj = rng.standard_normal((5, 3))

        def loss():
            return float((bn.forward(x, train=False) * proj).sum())

        gx, _, _ = bn.backward(x, proj, train=False)
        assert rel_err(gx, fd_grad(x, loss)) < REL_TOL

    def test_spatial_input_normalizes_per_channel(self, rng):
        bn = BatchNorm(2, dtype=np.float64)
        x = rng.standard_normal((2, 2, 3, 3, 3)) * 2 + 1
        out = bn.forward(x, train=True)
        assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-9)


class TestDense:
    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_match_finite_differences(self, seed):
        gen = np.random.default_rng(seed)
        fc = Dense(4, 3, rng=gen, dtype=np.float64)
        x = gen.standard_normal((5, 4))
        proj = gen.standard_normal((5, 3))

        def loss():
            return float((fc.forward(x) * proj).sum())

        gx, gw, gb = fc.backward(x, proj)
        assert rel_err(gx, fd_grad(x, loss)) < REL_TOL
        assert rel_err(gw, fd_grad(fc.weights, loss)) < REL_TOL
        assert rel_err(gb, fd_grad(fc.bias, loss)) < REL_TOL


class TestActivations:
    def test_relu_gradient_away_from_kink(self, rng):
        x = rng.standard_normal((4, 5))
        x = np.where(np.abs(x) < 0.05, 0.2, x)  # keep clear of the kink for FD
        proj = rng.standard_normal((4, 5))

        def loss():
            return float((relu(x) * proj).sum())

        assert rel_err(relu_backward(x, proj), fd_grad(x, loss)) < REL_TOL

    def test_dropout_zero_probability_is_identity(self, rng):
        mask = dropout_mask((100,), 0.0, rng)
        assert np.all(mask == 1.0)

    def test_dropout_scaling_preserves_expectation(self):
        gen = np.random.default_rng(0)
        mask = dropout_mask((200000,), 0.3, gen)
        kept = mask > 0
        assert np.allclose(mask[kept], 1 / 0.7)
        assert abs(mask.mean() - 1.0) < 0.01

    def test_dropout_probability_validated(self, rng):
        with pytest.raises(ValidationError):
            dropout_mask((4,), 1.0, rng)

    def test_log_softmax_symmetric_pair(self):
        out = log_softmax(np.array([[0.0, 0.0]]))
        assert np.allclose(out, [[-math.log(2), -math.log(2)]])

    def test_log_softmax_shift_invariance(self, rng):
        x = rng.standard_normal((6, 4))
        assert np.allclose(log_softmax(x), log_softmax(x + 100.0))

    def test_softmax_rows_sum_to_one(self, rng):
        assert np.allclose(softmax(rng.standard_normal((5, 3))).sum(axis=1), 1.0)

    def test_log_softmax_gradient(self, rng):
        x = rng.standard_normal((4, 3))
        proj = rng.standard_normal((4, 3))

        def loss():
            return float((log_softmax(x) * proj).sum())

        assert rel_err(log_softmax_backward(x, proj), fd_grad(x, loss)) < REL_TOL


class TestSchedules:
    def test_cosine_endpoints(self):
        sched = CosineSchedule(0.01, 200)
        assert sched.lr(0) == pytest.approx(0.01)
        assert sched.lr(200) == pytest.approx(0.0, abs=1e-18)
        assert sched.lr(100) == pytest.approx(0.005)

    def test_cosine_positive_before_final_epoch(self):
        sched = CosineSchedule(1e-2, 200)
        assert all(sched.lr(e) > 0 for e in range(200))

    def test_step_schedule_drop_epochs(self):
        sched = StepSchedule(1e-3, drops=(35, 45), factor=0.1)
        assert sched.lr(34) == pytest.approx(1e-3)
        assert sched.lr(35) == pytest.approx(1e-4)
        assert sched.lr(44) == pytest.approx(1e-4)
        assert sched.lr(45) == pytest.approx(1e-5)

    def test_sgd_zero_gradient_keeps_params(self):
        p = np.array([1.0, 2.0], dtype=np.float32)
        sgd_step([p], [np.zeros(2)], 0.1)
        assert p.tolist() == [1.0, 2.0]

    def test_sgd_moves_against_gradient(self):
        p = np.array([1.0], dtype=np.float64)
        sgd_step([p], [np.array([2.0])], 0.5)
        assert p[0] == pytest.approx(0.0)


class TestCheckpointBlob:
    def test_round_trip(self, tmp_path, rng):
        arrays = [rng.random((3, 2)).astype(np.float32), rng.random(5).astype(np.float32)]
        manifest = {"arrays": [{"name": "a", "shape": [3, 2]}, {"name": "b", "shape": [5]}], "extra": 1}
        path = tmp_path / "ckpt.monw"
        write_checkpoint(path, manifest, arrays)
        got_manifest, got_arrays = read_checkpoint(path)
        assert got_manifest["extra"] == 1
        for a, b in zip(arrays, got_arrays):
            assert np.array_equal(a, b)

    def test_crc_validation(self, tmp_path, rng):
        arrays = [rng.random(4).astype(np.float32)]
        manifest = {"arrays": [{"name": "a", "shape": [4]}]}
        raw = bytearray(checkpoint_bytes(manifest, arrays))
        raw[20] ^= 0xFF
        with pytest.raises(FormatError, match="CRC"):
            checkpoint_from_bytes(bytes(raw))

    def test_magic_validation(self):
        with pytest.raises(FormatError):
            checkpoint_from_bytes(b"XXXXxxxxxxxxxxxxxxxx")
