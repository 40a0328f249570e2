import math

import numpy as np
import pytest

from fedreplay.core import ModelParams, ValidationError
from fedreplay.mlp import (
    MlpSpec,
    backward,
    expand_head,
    forward,
    init_params,
    loss_ce,
    loss_kl,
    loss_mg,
    per_sample_grad_sqnorm,
    per_sample_grad_sqnorms,
    softmax,
)

from ._oracles import fd_logits_gradient, fd_param_gradient, naive_forward, rel_err

SMALL_SPEC = MlpSpec(feature_dim=2, num_classes=3, hidden=(16, 8))


def random_instance(seed, spec=SMALL_SPEC, rows=5):
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    # nonzero biases so their gradients are exercised too
    params = ModelParams(params.values + rng.normal(0, 0.1, params.size), params.shapes)
    x = rng.normal(size=(rows, spec.feature_dim))
    y = rng.integers(0, spec.num_classes, size=rows)
    return params, x, y, rng


class TestForward:
    def test_zero_params_zero_logits(self):
        spec = MlpSpec(3, 4, hidden=(5,))
        params = ModelParams(np.zeros(spec.param_count), spec.param_shapes())
        logits = forward(params, spec, np.random.default_rng(0).normal(size=(6, 3)))
        np.testing.assert_array_equal(logits, np.zeros((6, 4)))

    def test_identity_construction_passes_inputs_through(self):
        # identity weights in both layers; ReLU is transparent on x >= 0
        spec = MlpSpec(2, 2, hidden=(2,))
        eye = np.eye(2).reshape(-1)
        params = ModelParams(
            np.concatenate([eye, np.zeros(2), eye, np.zeros(2)]), spec.param_shapes()
        )
        x = np.array([[0.5, 2.0], [1.25, 0.0]])
        np.testing.assert_array_equal(forward(params, spec, x), x)

    def test_matches_naive_triple_loop_oracle(self):
        spec = MlpSpec(4, 3, hidden=(6, 5))
        rng = np.random.default_rng(11)
        params = init_params(spec, rng)
        x = rng.normal(size=(7, 4))
        expected = naive_forward(params, spec.layer_dims, x)
        got = forward(params, spec, x)
        assert rel_err(got, expected) < 1e-12

    def test_batch_shape_checked(self):
        params = init_params(SMALL_SPEC, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            forward(params, SMALL_SPEC, np.zeros((4, 9)))


class TestLossCE:
    def test_uniform_logits_give_log_k(self):
        for k in (2, 4, 7):
            value, _ = loss_ce(np.zeros((5, k)), np.zeros(5, dtype=int))
            assert abs(value - math.log(k)) < 1e-12

    def test_saturated_correct_logits_vanish(self):
        logits = np.full((4, 3), 0.0)
        labels = np.array([0, 1, 2, 0])
        logits[np.arange(4), labels] = 50.0
        value, _ = loss_ce(logits, labels)
        assert value < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        _, grad = loss_ce(logits, labels)
        fd = fd_logits_gradient(lambda z: loss_ce(z, labels)[0], logits)
        assert rel_err(grad, fd) < 1e-4


class TestLossMG:
    def test_zero_logits(self):
        value, grad = loss_mg(np.zeros((3, 4)))
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros((3, 4)))

    def test_unit_norm_single_row_gives_log_two(self):
        value, _ = loss_mg(np.array([[0.6, 0.8]]))
        assert abs(value - math.log(2.0)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(5, 3))
        _, grad = loss_mg(logits)
        fd = fd_logits_gradient(lambda z: loss_mg(z)[0], logits)
        assert rel_err(grad, fd) < 1e-4

    def test_monotone_in_logit_scale(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(4, 3))
        values = [loss_mg(s * logits)[0] for s in (0.5, 1.0, 2.0)]
        assert values[0] < values[1] < values[2]


class TestLossKL:
    def test_equal_distributions_give_zero(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(5, 4))
        value, grad = loss_kl(logits, logits.copy())
        assert value == 0.0
        np.testing.assert_allclose(grad, np.zeros_like(grad), atol=1e-15)

    def test_uniform_teacher_hand_computation(self):
        # teacher uniform over 4; student logits (1,0,0,0):
        # value = sum_k (1/4) ln((1/4)/s_k), s = softmax(1,0,0,0)
        denom = math.exp(1.0) + 3.0
        s = [math.exp(1.0) / denom, 1.0 / denom, 1.0 / denom, 1.0 / denom]
        expected = sum(0.25 * math.log(0.25 / sk) for sk in s)
        value, _ = loss_kl(np.zeros((1, 4)), np.array([[1.0, 0.0, 0.0, 0.0]]))
        assert abs(value - expected) < 1e-12

    def test_nonnegative_and_fd_gradient(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            teacher = rng.normal(size=(4, 3))
            student = rng.normal(size=(4, 3))
            value, grad = loss_kl(teacher, student)
            assert value >= 0.0
            fd = fd_logits_gradient(lambda z: loss_kl(teacher, z)[0], student)
            assert rel_err(grad, fd) < 1e-4

    def test_zero_iff_equal_softmax(self):
        shifted = np.array([[1.0, 2.0, 3.0]])
        # adding a constant to logits leaves the softmax unchanged
        value, _ = loss_kl(shifted, shifted + 5.0)
        assert value < 1e-12
        value, _ = loss_kl(shifted, shifted[:, ::-1])
        assert value > 1e-3


class TestBackward:
    def test_delta_zero_no_teacher_reduces_to_ce(self):
        params, x, y, _ = random_instance(1)
        breakdown, grad = backward(params, SMALL_SPEC, x, y, None, 0.0)
        assert breakdown.kl == 0.0
        assert breakdown.total == breakdown.ce
        fd = fd_param_gradient(
            lambda p: loss_ce(forward(p, SMALL_SPEC, x), y)[0], params
        )
        assert rel_err(grad.values, fd) < 1e-4

    def test_teacher_equal_to_student_zeroes_kl(self):
        params, x, y, _ = random_instance(2)
        teacher = forward(params, SMALL_SPEC, x)
        breakdown, _ = backward(params, SMALL_SPEC, x, y, teacher, 0.3)
        assert breakdown.kl == 0.0
        assert breakdown.total == breakdown.ce + 0.3 * breakdown.mg

    def test_breakdown_total_identity(self):
        params, x, y, rng = random_instance(3)
        teacher = rng.normal(size=(x.shape[0], SMALL_SPEC.num_classes))
        delta = 0.1
        breakdown, _ = backward(params, SMALL_SPEC, x, y, teacher, delta)
        recomputed = breakdown.ce + breakdown.kl + delta * breakdown.mg
        assert abs(breakdown.total - recomputed) <= 1e-12 * max(abs(recomputed), 1.0)

    def test_combined_gradient_matches_finite_differences(self):
        for seed in range(3):
            params, x, y, rng = random_instance(seed + 10)
            teacher = rng.normal(size=(x.shape[0], SMALL_SPEC.num_classes))

            def total(p):
                return backward(p, SMALL_SPEC, x, y, teacher, 0.1)[0].total

            _, grad = backward(params, SMALL_SPEC, x, y, teacher, 0.1)
            fd = fd_param_gradient(total, params)
            assert rel_err(grad.values, fd) < 1e-4


class TestPerSampleGradNorm:
    def test_saturated_optimum_is_near_zero(self):
        # logits engineered far along the correct class: -> CE gradient ~ 0
        spec = MlpSpec(2, 2, hidden=(2,))
        eye = np.eye(2).reshape(-1)
        params = ModelParams(
            np.concatenate([eye, np.zeros(2), 50.0 * eye, np.zeros(2)]), spec.param_shapes()
        )
        value = per_sample_grad_sqnorm(params, spec, np.array([3.0, 0.0]), label=0)
        assert value < 1e-6

    def test_consistent_with_full_backward_norm(self):
        params, x, y, _ = random_instance(20)
        for i in range(x.shape[0]):
            _, grad = backward(params, SMALL_SPEC, x[i : i + 1], y[i : i + 1], None, 0.0)
            expected = float(np.dot(grad.values, grad.values))
            got = per_sample_grad_sqnorm(params, SMALL_SPEC, x[i], int(y[i]))
            assert abs(got - expected) <= 1e-10 * max(expected, 1.0)

    def test_matches_finite_difference_assembly(self):
        params, x, y, _ = random_instance(21, rows=3)
        for i in range(3):
            fd = fd_param_gradient(
                lambda p: loss_ce(forward(p, SMALL_SPEC, x[i : i + 1]), y[i : i + 1])[0],
                params,
            )
            expected = float(np.dot(fd, fd))
            got = per_sample_grad_sqnorm(params, SMALL_SPEC, x[i], int(y[i]))
            assert abs(got - expected) <= 1e-3 * max(expected, 1e-12)

    def test_batch_version_matches_single(self):
        params, x, y, _ = random_instance(22, rows=6)
        batch = per_sample_grad_sqnorms(params, SMALL_SPEC, x, y)
        singles = [per_sample_grad_sqnorm(params, SMALL_SPEC, x[i], int(y[i])) for i in range(6)]
        np.testing.assert_allclose(batch, singles, rtol=1e-12)


class TestExpandHead:
    def test_same_size_is_identity(self):
        params = init_params(SMALL_SPEC, np.random.default_rng(0))
        out_params, out_spec = expand_head(params, SMALL_SPEC, SMALL_SPEC.num_classes)
        assert out_params is params and out_spec is SMALL_SPEC

    def test_shrink_rejected(self):
        params = init_params(SMALL_SPEC, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            expand_head(params, SMALL_SPEC, 2)

    def test_old_class_logits_bitwise_preserved(self):
        rng = np.random.default_rng(9)
        spec = MlpSpec(4, 3, hidden=(16,))
        params = init_params(spec, rng)
        x = rng.normal(size=(32, 4))
        before = forward(params, spec, x)
        big_params, big_spec = expand_head(params, spec, 5)
        after = forward(big_params, big_spec, x)
        assert np.array_equal(before, after[:, :3])

    def test_new_class_logits_are_zero(self):
        rng = np.random.default_rng(10)
        spec = MlpSpec(4, 3, hidden=(16,))
        params = init_params(spec, rng)
        big_params, big_spec = expand_head(params, spec, 6)
        logits = forward(big_params, big_spec, rng.normal(size=(8, 4)))
        np.testing.assert_array_equal(logits[:, 3:], np.zeros((8, 3)))

    def test_existing_parameters_preserved(self):
        rng = np.random.default_rng(12)
        params = init_params(SMALL_SPEC, rng)
        big_params, _ = expand_head(params, SMALL_SPEC, 7)
        (w_old, b_old) = params.layer_arrays()[-1]
        (w_new, b_new) = big_params.layer_arrays()[-1]
        np.testing.assert_array_equal(w_new[:, :3], w_old)
        np.testing.assert_array_equal(b_new[:3], b_old)
        np.testing.assert_array_equal(
            params.values[: params.size - w_old.size - b_old.size],
            big_params.values[: params.size - w_old.size - b_old.size],
        )


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(13)
    s = softmax(rng.normal(size=(10, 5)) * 10)
    np.testing.assert_allclose(s.sum(axis=1), np.ones(10), rtol=1e-12)
