import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stationlab import numerics as nm
from stationlab.errors import ContractViolation, LoadError

from helpers import conv3d_reference


def t(arr, grad=False):
    return nm.Tensor(np.asarray(arr), requires_grad=grad)


class TestConv3d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = t(rng.standard_normal((1, 4, 4, 4)))
        w = t(np.ones((1, 1, 1, 1, 1)))
        b = t(np.zeros(1))
        out = nm.conv3d(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_counting(self):
        x = t(np.ones((1, 5, 5, 5)))
        w = t(np.ones((1, 1, 3, 3, 3)))
        b = t(np.zeros(1))
        out = nm.conv3d(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3, 3), 27.0))

    def test_matches_reference_on_spec_case(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        got = nm.conv3d(t(x), t(w), t(b), stride=1, padding=0).data
        want = conv3d_reference(x, w, b, stride=1, pad=0)
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-3)
        assert rel.max() < 1e-5

    def test_matches_reference_on_50_random_shapes(self):
        rng = np.random.default_rng(2024)
        for trial in range(50):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.choice([1, 2]))
            pad = int(rng.integers(0, 3))
            dims = tuple(int(rng.integers(max(1, k - 2 * pad), 7)) for _ in range(3))
            if any((n + 2 * pad - k) // stride + 1 < 1 for n in dims):
                continue
            x = rng.standard_normal((cin, *dims)).astype(np.float32)
            w = rng.standard_normal((cout, cin, k, k, k)).astype(np.float32)
            b = rng.standard_normal(cout).astype(np.float32)
            got = nm.conv3d(t(x), t(w), t(b), stride, pad).data
            want = conv3d_reference(x, w, b, stride, pad)
            scale = max(np.abs(want).max(), 1e-3)
            assert np.abs(got - want).max() / scale < 1e-5, (
                f"trial {trial}: cin={cin} cout={cout} k={k} s={stride} p={pad} dims={dims}")

    def test_channel_mismatch_rejected(self):
        x = t(np.zeros((2, 4, 4, 4)))
        w = t(np.zeros((1, 3, 3, 3, 3)))
        with pytest.raises(ContractViolation):
            nm.conv3d(x, w, t(np.zeros(1)), 1, 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            nm.conv3d(t(np.zeros((1, 4, 4, 4))), t(np.zeros((1, 1, 2, 2, 2))),
                      t(np.zeros(1)), 1, 0)

    def test_empty_output_rejected(self):
        with pytest.raises(ContractViolation):
            nm.conv3d(t(np.zeros((1, 2, 2, 2))), t(np.zeros((1, 1, 5, 5, 5))),
                      t(np.zeros(1)), 1, 0)


class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax(t([0.0, 0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.25] * 4, rtol=0, atol=1e-7)

    def test_analytic_two_class(self):
        out = nm.softmax(t([math.log(3.0), 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.75, 0.25], rtol=1e-6)

    def test_shift_invariance_bitwise(self):
        # logits on a 1/64 grid so that adding c is exact in float32
        rng = np.random.default_rng(5)
        z = (rng.integers(-256, 256, size=12) / 64.0).astype(np.float32)
        for c in (1.0, -4.0, 2.5):
            a = nm.softmax(t(z), axis=0).data
            bb = nm.softmax(t(z + np.float32(c)), axis=0).data
            np.testing.assert_array_equal(a, bb)

    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=9))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_one_and_positive(self, logits):
        out = nm.softmax(t(np.asarray(logits, dtype=np.float32)), axis=0).data
        assert abs(float(out.sum()) - 1.0) <= 1e-6
        assert np.all(out > 0)


class TestDiceCeLoss:
    def test_perfect_one_hot_is_zero(self):
        target = np.array([[[0, 1], [2, 0]], [[1, 1], [0, 2]]])
        probs = np.zeros((3, 2, 2, 2), dtype=np.float32)
        for c in range(3):
            probs[c][target == c] = 1.0
        loss = nm.dice_ce_loss(t(probs), target, 3)
        assert float(loss.data) == 0.0

    def test_absent_class_with_zero_mass_contributes_nothing(self):
        # class 2 never appears and gets zero predicted mass: smoothed Dice 1
        target = np.zeros((2, 2, 2), dtype=np.int64)
        probs = np.zeros((3, 2, 2, 2), dtype=np.float32)
        probs[0] = 1.0
        loss = nm.dice_ce_loss(t(probs), target, 3)
        assert float(loss.data) == 0.0

    def test_uniform_probs_hand_value(self):
        # 2x2x2 grid, one voxel of class 1, uniform probabilities 0.5:
        # dice_0 = (2*0.5*7+1)/(4+7+1) = 2/3, dice_1 = (2*0.5*1+1)/(4+1+1) = 1/3
        # dice term = 1 - (2/3+1/3)/2 = 0.5; ce = ln 2
        target = np.zeros((2, 2, 2), dtype=np.int64)
        target[0, 0, 0] = 1
        probs = np.full((2, 2, 2, 2), 0.5, dtype=np.float32)
        loss = float(nm.dice_ce_loss(t(probs), target, 2).data)
        assert abs(loss - (0.5 + math.log(2.0))) < 1e-6

    def test_out_of_range_target_rejected(self):
        probs = np.full((2, 2, 2, 2), 0.5, dtype=np.float32)
        bad = np.full((2, 2, 2), 5, dtype=np.int64)
        with pytest.raises(ContractViolation):
            nm.dice_ce_loss(t(probs), bad, 2)


class TestShapeOps:
    def test_upsample_nearest_doubles(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        up = nm.upsample_nearest(t(x)).data
        assert up.shape == (1, 4, 4, 4)
        assert up[0, 0, 0, 0] == up[0, 1, 1, 1] == x[0, 0, 0, 0]
        assert up[0, 2, 2, 2] == x[0, 1, 1, 1]

    def test_concat_channels_order_and_copy(self):
        a = np.random.default_rng(0).standard_normal((2, 3, 3, 3)).astype(np.float32)
        b = np.random.default_rng(1).standard_normal((1, 3, 3, 3)).astype(np.float32)
        out = nm.concat_channels([t(a), t(b)]).data
        np.testing.assert_array_equal(out[:2], a)
        np.testing.assert_array_equal(out[2:], b)

    def test_concat_extent_mismatch(self):
        with pytest.raises(ContractViolation):
            nm.concat_channels([t(np.zeros((1, 2, 2, 2))), t(np.zeros((1, 3, 3, 3)))])

    def test_scale_channel(self):
        x = np.ones((3, 2, 2, 2), dtype=np.float32)
        out = nm.scale_channel(t(x), 1, 0.5).data
        assert np.all(out[0] == 1.0) and np.all(out[2] == 1.0)
        assert np.all(out[1] == 0.5)

    def test_scale_channel_bad_index(self):
        with pytest.raises(ContractViolation):
            nm.scale_channel(t(np.ones((2, 2, 2, 2))), 5, 1.0)

    def test_spatial_norm_standardizes(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 4, 4, 4)).astype(np.float32) * 7 + 3
        y = nm.spatial_norm(t(x)).data
        means = y.mean(axis=(1, 2, 3))
        stds = y.std(axis=(1, 2, 3))
        np.testing.assert_allclose(means, 0, atol=1e-5)
        np.testing.assert_allclose(stds, 1, atol=1e-3)


class TestOptimizer:
    def test_zero_grads_leave_params_and_bump_step(self):
        p = t(np.array([1.0, -2.0], dtype=np.float32), grad=True)
        state = nm.OptimizerState(learning_rate=0.1)
        before = p.data.copy()
        nm.optimizer_step(state, [p], [np.zeros_like(p.data)])
        np.testing.assert_array_equal(p.data, before)
        assert state.step_count == 1

    def test_two_steps_match_hand_computation(self):
        # scalar parameter, constant gradient g: the bias-corrected update is
        # lr * mhat / (sqrt(vhat) + eps) with mhat = g and vhat = g*g each step
        lr, g0 = 0.1, 0.5
        p = nm.Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        state = nm.OptimizerState(learning_rate=lr)
        expected = 1.0
        m = v = 0.0
        for step in (1, 2):
            m = 0.9 * m + 0.1 * g0
            v = 0.999 * v + 0.001 * g0 * g0
            mhat = m / (1 - 0.9 ** step)
            vhat = v / (1 - 0.999 ** step)
            expected -= lr * mhat / (math.sqrt(vhat) + 1e-8)
            nm.optimizer_step(state, [p], [np.array([g0], dtype=np.float64)])
        assert abs(float(p.data[0]) - expected) < 1e-9
        assert state.step_count == 2

    def test_bitwise_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            p = t(rng.standard_normal(5).astype(np.float32), grad=True)
            state = nm.OptimizerState(learning_rate=0.01)
            for _ in range(5):
                g = rng.standard_normal(5).astype(np.float32)
                nm.optimizer_step(state, [p], [g])
            return p.data.tobytes()

        assert run() == run()

    def test_missing_grad_rejected(self):
        p = t(np.zeros(3), grad=True)
        with pytest.raises(ContractViolation):
            nm.optimizer_step(nm.OptimizerState(learning_rate=0.1), [p])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        params = [rng.standard_normal((2, 3)).astype(np.float32),
                  rng.standard_normal(4).astype(np.float32)]
        path = tmp_path / "model.ckpt"
        nm.save_params(path, {"seed": 7, "layers": ["a", "b"]}, params)
        header, loaded = nm.load_params(path)
        assert header["seed"] == 7
        for a, b in zip(params, loaded):
            np.testing.assert_array_equal(a, b)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "model.ckpt"
        nm.save_params(path, {}, [np.zeros(4, dtype=np.float32)])
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(LoadError, match="truncated payload"):
            nm.load_params(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"{}\n")
        with pytest.raises(LoadError, match="magic"):
            nm.load_params(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "model.ckpt"
        nm.save_params(path, {}, [np.zeros(2, dtype=np.float32)])
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(LoadError, match="trailing"):
            nm.load_params(path)
