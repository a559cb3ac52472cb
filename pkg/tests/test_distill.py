"""Distillation losses and soft-target generation.

The combined objective is checked by composing the already-validated
numeric-core operations as an in-test oracle; temperature-scaling
behavior is pinned to values from a 50-digit evaluation of the closed
forms.
"""

import numpy as np
import pytest

from kdtrain.datasets import SynthTaskSpec, generate_synth
from kdtrain.distill import (
    DistillLossSpec,
    SoftTargetSet,
    batch_soft_loss,
    combined_loss_and_grad,
    export_soft_targets,
    frame_objective,
    logit_matching_loss_and_grad,
    one_hot_rows,
    soft_ce_loss_and_grad,
    soften_logits,
)
from kdtrain.errors import InvalidArgumentError, ShapeError
from kdtrain.feedforward import FeedForwardParams, ff_forward, init_feedforward
from kdtrain.formats import checkpoint_digest
from kdtrain.numeric import cross_entropy, entropy, finite_diff_check, logit_gradient, softmax_t

# T^2-scaled soft gradient and loss for z=[.5,-.2,-.3], v=[1,0,-1]
# (teacher posteriors taken at the same T), from 50-digit evaluation
SCALED_T2_GRAD = [-0.17085840364313587, -0.0209722550066755, 0.19183065864981137]
SCALED_T2_LOSS = 4.1881956494133232
SCALED_T4_GRAD = [-0.17213121621745783, -0.042781354192733973, 0.2149125704101918]
SCALED_T4_LOSS = 17.370182661874406


class TestDistillLossSpec:
    def test_alpha_bounds(self):
        with pytest.raises(InvalidArgumentError):
            DistillLossSpec("reg", alpha=1.5)
        with pytest.raises(InvalidArgumentError):
            DistillLossSpec("reg", alpha=-0.1)

    def test_unknown_mode(self):
        with pytest.raises(InvalidArgumentError):
            DistillLossSpec("kaldi")

    def test_t2_scaling_defaults_on_only_for_reg(self):
        assert DistillLossSpec("reg").scale_resolved
        assert not DistillLossSpec("soft").scale_resolved
        assert not DistillLossSpec("pretrain").scale_resolved
        assert DistillLossSpec("soft", scale_soft_by_t2=True).scale_resolved
        assert not DistillLossSpec("reg", scale_soft_by_t2=False).scale_resolved


class TestSoftenLogits:
    def test_uniform_for_constant_logits(self):
        for t in (0.5, 1.0, 10.0):
            np.testing.assert_allclose(soften_logits([0, 0, 0], t), [1 / 3] * 3, rtol=1e-15)

    def test_known_values(self):
        np.testing.assert_allclose(
            soften_logits([2, 1, 0], 2.0),
            [0.50648039105565403, 0.30719588571849840, 0.18632372322584758],
            rtol=1e-14,
        )

    def test_rank_preserved_at_any_temperature(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            z = rng.uniform(-5, 5, size=6)
            for t in (0.3, 1.0, 4.0, 100.0):
                p = soften_logits(z, t)
                np.testing.assert_array_equal(np.argsort(p), np.argsort(z))


class TestSoftCeLossAndGrad:
    def test_fixed_point_has_zero_gradient_and_entropy_loss(self):
        """When the student's softened output equals the soft target the
        gradient vanishes and the loss is the target's entropy."""
        v = np.array([1.2, -0.4, 0.0, 0.7])
        p = softmax_t(v, 2.0)
        loss, grad = soft_ce_loss_and_grad(v, p, 2.0)
        np.testing.assert_array_equal(grad, np.zeros(4))
        np.testing.assert_allclose(loss, entropy(p), rtol=1e-12)

    def test_one_hot_at_t1_reduces_to_hard_loss(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            z = rng.uniform(-3, 3, size=5)
            t = np.zeros(5)
            t[rng.integers(0, 5)] = 1.0
            loss, grad = soft_ce_loss_and_grad(z, t, 1.0)
            q = softmax_t(z, 1.0)
            assert abs(loss - cross_entropy(t, q)) < 1e-12
            np.testing.assert_allclose(grad, logit_gradient(t, q), atol=1e-12)

    def test_scaled_values_against_closed_form(self):
        z = [0.5, -0.2, -0.3]
        for t_val, want_grad, want_loss in (
            (2.0, SCALED_T2_GRAD, SCALED_T2_LOSS),
            (4.0, SCALED_T4_GRAD, SCALED_T4_LOSS),
        ):
            p = softmax_t([1.0, 0.0, -1.0], t_val)
            loss, grad = soft_ce_loss_and_grad(z, p, t_val, scale_by_t2=True)
            np.testing.assert_allclose(grad, want_grad, rtol=1e-13)
            np.testing.assert_allclose(loss, want_loss, rtol=1e-13)

    def test_large_t_approaches_logit_matching(self):
        """With T large against the logit scale, the T^2-scaled gradient
        approaches (z - v)/K."""
        rng = np.random.default_rng(2)
        for _ in range(50):
            z = rng.uniform(-1, 1, size=4)
            z -= z.mean()
            v = rng.uniform(-1, 1, size=4)
            v -= v.mean()
            p = softmax_t(v, 1000.0)
            _, grad = soft_ce_loss_and_grad(z, p, 1000.0, scale_by_t2=True)
            np.testing.assert_allclose(grad, (z - v) / 4.0, rtol=1e-2)

    def test_unscaled_gradient_vanishes_at_large_t(self):
        rng = np.random.default_rng(3)
        z = rng.uniform(-1, 1, size=4)
        v = rng.uniform(-1, 1, size=4)
        _, g1 = soft_ce_loss_and_grad(z, softmax_t(v, 1.0), 1.0)
        _, g1000 = soft_ce_loss_and_grad(z, softmax_t(v, 1000.0), 1000.0)
        assert np.linalg.norm(g1000) < 1e-2 * np.linalg.norm(g1)

    def test_gradient_passes_finite_differences(self):
        rng = np.random.default_rng(4)
        for scale in (False, True):
            z = rng.uniform(-2, 2, size=4)
            p = softmax_t(rng.uniform(-2, 2, size=4), 3.0)

            def loss(zv):
                return soft_ce_loss_and_grad(zv, p, 3.0, scale)[0]

            _, grad = soft_ce_loss_and_grad(z, p, 3.0, scale)
            assert finite_diff_check(loss, z, grad, step=1e-5) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_ce_loss_and_grad([1.0, 2.0], [0.5, 0.25, 0.25], 1.0)


class TestCombinedLossAndGrad:
    def test_alpha_zero_equals_soft_only(self):
        z = np.array([0.3, -0.8, 0.5])
        t = np.array([0.0, 1.0, 0.0])
        p = softmax_t([1.0, 0.5, -0.5], 2.0)
        spec = DistillLossSpec("reg", alpha=0.0, temperature=2.0)
        loss_c, grad_c = combined_loss_and_grad(z, t, p, spec)
        loss_s, grad_s = soft_ce_loss_and_grad(z, p, 2.0, scale_by_t2=True)
        assert loss_c == loss_s
        np.testing.assert_array_equal(grad_c, grad_s)

    def test_identical_targets_at_t1_scale_off(self):
        """soft == hard one-hot, T = 1, no scaling: everything is just
        (1 + alpha) times the hard path."""
        z = np.array([0.2, 1.1, -0.7])
        t = np.array([1.0, 0.0, 0.0])
        spec = DistillLossSpec("reg", alpha=0.3, temperature=1.0, scale_soft_by_t2=False)
        loss, grad = combined_loss_and_grad(z, t, t, spec)
        q = softmax_t(z, 1.0)
        np.testing.assert_allclose(loss, 1.3 * cross_entropy(t, q), rtol=1e-12)
        np.testing.assert_allclose(grad, 1.3 * logit_gradient(t, q), atol=1e-14)

    def test_matches_composition_of_validated_paths(self):
        """alpha = 0.5, T = 2, K = 3: equals hard + scaled-soft composed
        from the numeric-core primitives, to 1e-12."""
        z = np.array([0.5, -0.2, -0.3])
        t = np.array([0.0, 0.0, 1.0])
        p = softmax_t([1.0, 0.0, -1.0], 2.0)
        spec = DistillLossSpec("reg", alpha=0.5, temperature=2.0)
        loss, grad = combined_loss_and_grad(z, t, p, spec)
        q1 = softmax_t(z, 1.0)
        q2 = softmax_t(z, 2.0)
        want_loss = 0.5 * cross_entropy(t, q1) + 4.0 * cross_entropy(p, q2)
        want_grad = 0.5 * (q1 - t) + 4.0 * (q2 - p) / 2.0
        np.testing.assert_allclose(loss, want_loss, atol=1e-12)
        np.testing.assert_allclose(grad, want_grad, atol=1e-12)

    def test_linearity_on_random_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            k = int(rng.integers(2, 7))
            z = rng.uniform(-3, 3, size=k)
            t = np.zeros(k)
            t[rng.integers(0, k)] = 1.0
            temp = float(rng.uniform(0.5, 5))
            alpha = float(rng.uniform(0, 1))
            p = softmax_t(rng.uniform(-3, 3, size=k), temp)
            spec = DistillLossSpec("reg", alpha=alpha, temperature=temp)
            _, grad = combined_loss_and_grad(z, t, p, spec)
            hard = logit_gradient(t, softmax_t(z, 1.0))
            _, soft = soft_ce_loss_and_grad(z, p, temp, scale_by_t2=True)
            np.testing.assert_allclose(grad, alpha * hard + soft, atol=1e-12)

    def test_shape_mismatch(self):
        spec = DistillLossSpec("reg")
        with pytest.raises(ShapeError):
            combined_loss_and_grad([1.0, 2.0], [1.0, 0.0, 0.0], [0.5, 0.5], spec)


class TestLogitMatching:
    def test_zero_at_match(self):
        loss, grad = logit_matching_loss_and_grad([1.0, -2.0], [1.0, -2.0])
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros(2))

    def test_hand_value(self):
        loss, grad = logit_matching_loss_and_grad([1.0, 2.0], [0.0, 0.0])
        assert loss == 2.5
        np.testing.assert_array_equal(grad, [1.0, 2.0])

    def test_gradient_passes_finite_differences(self):
        rng = np.random.default_rng(6)
        z = rng.uniform(-3, 3, size=5)
        v = rng.uniform(-3, 3, size=5)

        def loss(zv):
            return logit_matching_loss_and_grad(zv, v)[0]

        _, grad = logit_matching_loss_and_grad(z, v)
        assert finite_diff_check(loss, z, grad, step=1e-5) < 1e-8


@pytest.fixture(scope="module")
def tiny_task():
    spec = SynthTaskSpec(
        num_classes=4, feature_dim=5, train_utterances=10, cv_utterances=3,
        test_utterances=3, min_frames=8, max_frames=15,
    )
    return generate_synth(spec, 99).train


class TestExportSoftTargets:
    def test_zero_teacher_gives_uniform_rows(self, tiny_task):
        teacher = FeedForwardParams(
            [np.zeros((6, 5)), np.zeros((4, 6))], [np.zeros(6), np.zeros(4)]
        )
        soft = export_soft_targets(teacher, tiny_task, 1.0)
        np.testing.assert_allclose(soft.rows, 0.25, rtol=1e-15)

    def test_frame_count_and_temperature_recorded(self, tiny_task):
        teacher = init_feedforward([5, 8, 4], np.random.default_rng(7))
        soft = export_soft_targets(teacher, tiny_task, 2.0)
        assert soft.frame_count == tiny_task.total_frames
        assert soft.temperature == 2.0
        assert soft.teacher_digest == checkpoint_digest(teacher)

    def test_rows_match_composed_oracle(self, tiny_task):
        """Rows equal softmax_t of ff_forward logits, frame by frame."""
        teacher = init_feedforward([5, 6, 4], np.random.default_rng(8), scale=0.7)
        soft = export_soft_targets(teacher, tiny_task, 2.0)
        logits = ff_forward(teacher, tiny_task.features)
        for idx in (0, 1, tiny_task.total_frames - 1):
            np.testing.assert_allclose(
                soft.rows[idx], softmax_t(logits[idx], 2.0), atol=1e-15
            )

    def test_higher_temperature_rows_have_higher_entropy(self, tiny_task):
        teacher = init_feedforward([5, 8, 4], np.random.default_rng(9), scale=0.8)
        s1 = export_soft_targets(teacher, tiny_task, 1.0)
        s2 = export_soft_targets(teacher, tiny_task, 2.0)
        h1 = np.array([entropy(r) for r in s1.rows])
        h2 = np.array([entropy(r) for r in s2.rows])
        assert np.all(h2 >= h1)
        assert np.mean(h2) > np.mean(h1)

    def test_teacher_is_fixed_point_of_distillation(self, tiny_task):
        """Distilling at T = 1 and evaluating at the teacher's own logits
        gives exactly zero gradient."""
        teacher = init_feedforward([5, 8, 4], np.random.default_rng(10), scale=0.6)
        soft = export_soft_targets(teacher, tiny_task, 1.0)
        logits = ff_forward(teacher, tiny_task.features)
        for idx in range(0, tiny_task.total_frames, 17):
            _, grad = soft_ce_loss_and_grad(logits[idx], soft.rows[idx], 1.0)
            np.testing.assert_array_equal(grad, np.zeros(4))

    def test_soft_target_set_validation(self):
        with pytest.raises(ShapeError):
            SoftTargetSet(1.0, np.ones(5))
        with pytest.raises(InvalidArgumentError):
            SoftTargetSet(0.0, np.full((3, 2), 0.5))
        with pytest.raises(InvalidArgumentError):
            SoftTargetSet(1.0, np.full((3, 2), 0.5), b"short")


class TestBatchObjectives:
    """The vectorized trainer paths agree with the per-frame operations."""

    def test_batch_soft_matches_per_frame_ops(self):
        rng = np.random.default_rng(11)
        logits = rng.uniform(-3, 3, size=(40, 5))
        targets = np.vstack([softmax_t(rng.uniform(-2, 2, size=5), 2.0) for _ in range(40)])
        losses, grads, _ = batch_soft_loss(logits, targets, 2.0, True)
        for i in range(40):
            loss_i, grad_i = soft_ce_loss_and_grad(logits[i], targets[i], 2.0, True)
            assert abs(losses[i] - loss_i) < 1e-14
            np.testing.assert_allclose(grads[i], grad_i, atol=1e-15)

    def test_hard_mode_is_soft_mode_with_one_hots_bitwise(self):
        rng = np.random.default_rng(12)
        logits = rng.uniform(-3, 3, size=(30, 4))
        labels = rng.integers(0, 4, size=30)
        spec_h = DistillLossSpec("hard")
        spec_s = DistillLossSpec("soft", temperature=1.0)
        l_h, g_h, _, _ = frame_objective(spec_h, logits, labels)
        l_s, g_s, _, _ = frame_objective(spec_s, logits, labels, one_hot_rows(labels, 4))
        np.testing.assert_array_equal(l_h, l_s)
        np.testing.assert_array_equal(g_h, g_s)

    def test_reg_mode_gradient_linearity(self):
        rng = np.random.default_rng(13)
        logits = rng.uniform(-3, 3, size=(25, 4))
        labels = rng.integers(0, 4, size=25)
        soft = np.vstack([softmax_t(rng.uniform(-2, 2, size=4), 2.0) for _ in range(25)])
        spec = DistillLossSpec("reg", alpha=0.5, temperature=2.0)
        _, grads, _, _ = frame_objective(spec, logits, labels, soft)
        _, g_hard, _, _ = frame_objective(DistillLossSpec("hard"), logits, labels)
        g_soft = batch_soft_loss(logits, soft, 2.0, True)[1]
        np.testing.assert_allclose(grads, 0.5 * g_hard + g_soft, atol=1e-12)

    def test_logitmatch_batch_matches_op(self):
        rng = np.random.default_rng(14)
        logits = rng.uniform(-2, 2, size=(10, 3))
        teacher = rng.uniform(-2, 2, size=(10, 3))
        losses, grads, _, _ = frame_objective(
            DistillLossSpec("logitmatch"), logits, rng.integers(0, 3, size=10),
            teacher_logits=teacher,
        )
        for i in range(10):
            loss_i, grad_i = logit_matching_loss_and_grad(logits[i], teacher[i])
            assert abs(losses[i] - loss_i) < 1e-12
            np.testing.assert_allclose(grads[i], grad_i, atol=1e-15)

    def test_missing_inputs_rejected(self):
        logits = np.zeros((4, 3))
        labels = np.zeros(4, dtype=int)
        with pytest.raises(InvalidArgumentError):
            frame_objective(DistillLossSpec("soft"), logits, labels)
        with pytest.raises(InvalidArgumentError):
            frame_objective(DistillLossSpec("logitmatch"), logits, labels)
        with pytest.raises(InvalidArgumentError):
            frame_objective(DistillLossSpec("pretrain"), logits, labels, np.zeros((4, 3)))
