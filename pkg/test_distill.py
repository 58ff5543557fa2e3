"""Tests for the distillation gradients, the edit loop and the replayed inversion"""

import math

import numpy as np
import pytest

from conftest import StubBackend, single_gaussian
from idslab.backend import NULL, Condition, MlpDenoiserBackend, train_denoiser
from idslab.core import NoiseSchedule, Rng, alpha_at, forward_diffuse
from idslab.distill import (
    DistillConfig,
    EditResult,
    EditTask,
    dds_gradient,
    edit,
    fpr_sds_gradient,
    ids_gradient,
    invert,
    sds_gradient,
)
from idslab.errors import ConditionError, DivergenceError, DomainError, ReplayError, UsageError
from idslab.fpr import INNER_OMEGA, FprConfig
from idslab.metrics import identity_residual, mse

LABEL0 = Condition.of(0)
LABEL1 = Condition.of(1)


def source_task(world, seed: int, label: int = 0, target: int = 1) -> EditTask:
    z_src = world.sample(Condition.of(label), Rng(seed), 1)[0]
    return EditTask(z_src, Condition.of(label), Condition.of(target))


def nearest_residual(world, z_edit, z_src) -> float:
    mu_cond = world.mode(world.nearest_label(z_edit))
    return identity_residual(z_edit, mu_cond, z_src, world.mode(world.nearest_label(z_src)))


class TestSdsGradient:

    def test_exact_noise_prediction_gives_zero(self):
        z = np.array([0.4, -1.2])
        t = 0.3
        schedule = NoiseSchedule()
        alpha = alpha_at(schedule, t)
        stub = StubBackend(lambda z_t, c: (z_t - math.sqrt(alpha) * z) / math.sqrt(1 - alpha), (2,))
        grad = sds_gradient(stub, z, LABEL0, t, np.array([0.7, 0.1]), 0.0)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_standard_gaussian_value(self):
        backend = single_gaussian()
        z, eps = np.array([1.0, -0.5]), np.array([0.2, 0.3])
        t = 0.6
        alpha = alpha_at(backend.schedule, t)
        z_t = forward_diffuse(z, eps, t, backend.schedule)
        np.testing.assert_allclose(sds_gradient(backend, z, LABEL0, t, eps, 7.5),
                                   math.sqrt(1 - alpha) * z_t - eps, rtol=1e-12)


class TestDdsGradient:

    def test_identical_sides_give_exact_zero(self, two_mode):
        z = np.array([-2.0, 0.4])
        grad = dds_gradient(two_mode, z, LABEL0, z.copy(), LABEL0, 0.5, np.array([0.3, 0.3]), 7.5)
        np.testing.assert_array_equal(grad, np.zeros(2))

    def test_antisymmetric(self, two_mode):
        a, b, eps = np.array([-2.0, 0.4]), np.array([1.5, -0.2]), np.array([0.1, 0.9])
        forward = dds_gradient(two_mode, a, LABEL1, b, LABEL0, 0.4, eps, 7.5)
        backward = dds_gradient(two_mode, b, LABEL0, a, LABEL1, 0.4, eps, 7.5)
        np.testing.assert_array_equal(forward, -backward)

    def test_difference_of_sds_terms(self, two_mode):
        a, b, eps = np.array([-2.0, 0.4]), np.array([1.5, -0.2]), np.array([0.1, 0.9])
        expected = sds_gradient(two_mode, a, LABEL1, 0.4, eps, 7.5) - sds_gradient(two_mode, b, LABEL0, 0.4, eps, 7.5)
        np.testing.assert_allclose(dds_gradient(two_mode, a, LABEL1, b, LABEL0, 0.4, eps, 7.5), expected, atol=1e-12)

    def test_silent_source_reduces_to_sds(self):
        stub = StubBackend(lambda z_t, c: np.zeros(2) if c.label == 0 else np.tanh(z_t), (2,))
        z_trg, z_src, eps = np.array([0.5, -0.5]), np.array([1.0, 2.0]), np.array([0.3, -0.1])
        grad = dds_gradient(stub, z_trg, LABEL1, z_src, LABEL0, 0.5, eps, 0.0)
        np.testing.assert_allclose(grad, sds_gradient(stub, z_trg, LABEL1, 0.5, eps, 0.0) + eps, atol=1e-15)


class TestIdsGradient:

    def test_no_refinement_is_dds(self, two_mode):
        z_trg, z_src, eps = np.array([0.3, 0.1]), np.array([-2.0, 0.2]), np.array([-0.4, 1.1])
        grad, trace = ids_gradient(two_mode, z_trg, LABEL1, z_src, LABEL0, 0.5, eps, 7.5, FprConfig(n_iters=0))
        np.testing.assert_array_equal(grad, dds_gradient(two_mode, z_trg, LABEL1, z_src, LABEL0, 0.5, eps, 7.5))
        assert trace.losses == []

    def test_identical_sides_give_exact_zero(self, two_mode):
        z = np.array([-2.0, 0.4])
        grad, _ = ids_gradient(two_mode, z, LABEL0, z.copy(), LABEL0, 0.5, np.array([0.3, 0.3]), 0.0,
                               FprConfig(n_iters=3))
        np.testing.assert_array_equal(grad, np.zeros(2))

    def test_diffuses_both_sides_with_guided_noise(self, two_mode):
        z_trg, z_src, eps = np.array([0.3, 0.1]), np.array([-2.0, 0.2]), np.array([-0.4, 1.1])
        grad, trace = ids_gradient(two_mode, z_trg, LABEL1, z_src, LABEL0, 0.5, eps, 0.0, FprConfig(lam=0.5))
        np.testing.assert_array_equal(
            grad, dds_gradient(two_mode, z_trg, LABEL1, z_src, LABEL0, 0.5, trace.eps_star, 0.0))
        assert not np.array_equal(trace.eps_star, eps)

    def test_refined_sds(self, two_mode):
        z, eps = np.array([-2.0, 0.2]), np.array([-0.4, 1.1])
        grad, trace = fpr_sds_gradient(two_mode, z, LABEL0, 0.5, eps, 0.0, FprConfig(lam=0.5))
        np.testing.assert_array_equal(grad, sds_gradient(two_mode, z, LABEL0, 0.5, trace.eps_star, 0.0))


class TestDistillConfig:

    def test_shipped_defaults(self):
        cfg = DistillConfig()
        assert (cfg.method, cfg.omega, cfg.steps, cfg.lr) == ("ids", 7.5, 200, 0.05)
        assert (cfg.fpr.lam, cfg.fpr.n_iters, cfg.fpr.omega) == (1.0, 3, INNER_OMEGA)

    @pytest.mark.parametrize("kwargs", [{"method": "cds"}, {"steps": -1}, {"lr": 0.0}, {"t_min": 0.5, "t_max": 0.5},
                                        {"omega": -3.0}, {"seed": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(DomainError):
            DistillConfig(**kwargs)


class TestEdit:

    def test_zero_steps_returns_source(self, two_mode_world):
        task = source_task(two_mode_world, 0)
        result = edit(two_mode_world.backend, task, DistillConfig(steps=0))
        np.testing.assert_array_equal(result.z_trg, task.z_src)
        assert result.noise_record == [] and result.grad_norms == []

    @pytest.mark.parametrize("method", ["sds", "dds", "ids", "fpr-sds"])
    def test_deterministic(self, two_mode_world, method):
        task = source_task(two_mode_world, 1)
        cfg = DistillConfig(method=method, steps=15, seed=4)
        first = edit(two_mode_world.backend, task, cfg)
        second = edit(two_mode_world.backend, task, cfg)
        np.testing.assert_array_equal(first.z_trg, second.z_trg)
        assert len(first.noise_record) == 15
        assert all(math.isfinite(g) for g in first.grad_norms)

    def test_refined_methods_record_losses(self, two_mode_world):
        task = source_task(two_mode_world, 1)
        result = edit(two_mode_world.backend, task, DistillConfig(method="ids", steps=5, omega=0.0))
        assert len(result.fpr_final_losses) == 5
        plain = edit(two_mode_world.backend, task, DistillConfig(method="dds", steps=5, omega=0.0))
        assert plain.fpr_final_losses == []

    @pytest.mark.parametrize("method", ["ids", "fpr-sds"])
    def test_default_config_stays_finite(self, two_mode_world, method):
        for seed in range(3):
            task = source_task(two_mode_world, 20 + seed)
            result = edit(two_mode_world.backend, task, DistillConfig(method=method, steps=40, seed=seed))
            assert np.all(np.isfinite(result.z_trg))
            assert all(math.isfinite(g) for g in result.grad_norms)
            assert len(result.fpr_final_losses) == 40

    def test_default_ids_edit_reaches_target(self, two_mode_world):
        for seed in range(3):
            task = source_task(two_mode_world, 30 + seed)
            result = edit(two_mode_world.backend, task, DistillConfig(seed=seed))
            assert two_mode_world.nearest_label(result.z_trg) == 1

    @pytest.mark.parametrize("method", ["dds", "ids"])
    def test_same_condition_is_a_fixed_point(self, two_mode_world, method):
        task = source_task(two_mode_world, 2, label=0, target=0)
        result = edit(two_mode_world.backend, task, DistillConfig(method=method, steps=10))
        np.testing.assert_array_equal(result.z_trg, task.z_src)

    def test_restricted_time_range(self, two_mode_world):
        task = source_task(two_mode_world, 3)
        narrow = DistillConfig(method="dds", steps=20, t_min=0.0, t_max=0.2)
        result = edit(two_mode_world.backend, task, narrow)
        assert all(0.0 <= r.t < 0.2 for r in result.noise_record)
        default = edit(two_mode_world.backend, task, DistillConfig(method="dds", steps=20))
        assert not np.array_equal(result.z_trg, default.z_trg)
        np.testing.assert_array_equal(result.z_trg, edit(two_mode_world.backend, task, narrow).z_trg)

    def test_snapshots(self, two_mode_world):
        task = source_task(two_mode_world, 3)
        result = edit(two_mode_world.backend, task, DistillConfig(method="dds", steps=10, snapshot_every=5))
        assert [step for step, _ in result.trajectory] == [5, 10]
        np.testing.assert_array_equal(result.trajectory[-1][1], result.z_trg)

    def test_huge_learning_rate_diverges(self, two_mode_world):
        task = source_task(two_mode_world, 0)
        with pytest.raises(DivergenceError) as info:
            edit(two_mode_world.backend, task, DistillConfig(method="dds", steps=5, lr=1e9))
        assert info.value.iteration == 0

    def test_null_condition_rejected(self, two_mode_world):
        task = EditTask(np.zeros(2), LABEL0, NULL)
        with pytest.raises(UsageError):
            edit(two_mode_world.backend, task, DistillConfig(steps=1))

    def test_unknown_label_rejected(self, two_mode_world):
        task = EditTask(np.zeros(2), LABEL0, Condition.of(5))
        with pytest.raises(ConditionError):
            edit(two_mode_world.backend, task, DistillConfig(steps=1))

    def test_serialization(self, two_mode_world):
        task = source_task(two_mode_world, 5)
        result = edit(two_mode_world.backend, task, DistillConfig(method="ids", steps=4, snapshot_every=2))
        restored = EditResult.from_dict(result.to_dict())
        np.testing.assert_array_equal(restored.z_trg, result.z_trg)
        assert [r.t for r in restored.noise_record] == [r.t for r in result.noise_record]
        for a, b in zip(restored.noise_record, result.noise_record):
            np.testing.assert_array_equal(a.noise, b.noise)
        assert restored.config == result.config

    def test_bad_schema(self, two_mode_world):
        doc = edit(two_mode_world.backend, source_task(two_mode_world, 5), DistillConfig(steps=1)).to_dict()
        doc["schema"] = 7
        with pytest.raises(ReplayError):
            EditResult.from_dict(doc)


class TestInvert:

    def test_zero_step_edit_inverts_exactly(self, two_mode_world):
        task = source_task(two_mode_world, 0)
        cfg = DistillConfig(method="ids", steps=0)
        result = edit(two_mode_world.backend, task, cfg)
        assert mse(invert(two_mode_world.backend, result, task, cfg), task.z_src) == 0.0

    @pytest.mark.parametrize("method", ["sds", "dds", "ids", "fpr-sds"])
    def test_deterministic(self, two_mode_world, method):
        task = source_task(two_mode_world, 6)
        cfg = DistillConfig(method=method, steps=10)
        result = edit(two_mode_world.backend, task, cfg)
        first = invert(two_mode_world.backend, result, task, cfg)
        np.testing.assert_array_equal(first, invert(two_mode_world.backend, result, task, cfg))
        assert np.all(np.isfinite(first))

    def test_method_mismatch(self, two_mode_world):
        task = source_task(two_mode_world, 6)
        result = edit(two_mode_world.backend, task, DistillConfig(method="dds", steps=3))
        with pytest.raises(ReplayError):
            invert(two_mode_world.backend, result, task, DistillConfig(method="ids", steps=3))

    def test_step_mismatch(self, two_mode_world):
        task = source_task(two_mode_world, 6)
        result = edit(two_mode_world.backend, task, DistillConfig(method="dds", steps=3))
        with pytest.raises(ReplayError):
            invert(two_mode_world.backend, result, task, DistillConfig(method="dds", steps=4))

    def test_shape_mismatch(self, two_mode_world):
        task = source_task(two_mode_world, 6)
        result = edit(two_mode_world.backend, task, DistillConfig(method="dds", steps=2))
        other = EditTask(np.zeros(3), LABEL0, LABEL1)
        with pytest.raises(ReplayError):
            invert(two_mode_world.backend, result, other, DistillConfig(method="dds", steps=2))

    def test_replays_through_saved_document(self, two_mode_world):
        task = source_task(two_mode_world, 8)
        cfg = DistillConfig(method="ids", steps=6)
        result = edit(two_mode_world.backend, task, cfg)
        direct = invert(two_mode_world.backend, result, task, cfg)
        replayed = invert(two_mode_world.backend, EditResult.from_dict(result.to_dict()), task, cfg)
        np.testing.assert_array_equal(direct, replayed)


@pytest.mark.slow
class TestIdentityPreservation:
    SEEDS = 60

    @pytest.fixture
    def edits(self, two_mode_world):
        rows = []
        for seed in range(self.SEEDS):
            task = source_task(two_mode_world, 100 + seed)
            pair = {}
            for method in ("dds", "ids"):
                # shipped defaults: omega 7.5, lambda 1, three refinement steps, 200 steps at lr 0.05
                cfg = DistillConfig(method=method, seed=seed)
                pair[method] = (edit(two_mode_world.backend, task, cfg), cfg)
            rows.append((task, pair))
        return rows

    def test_edits_reach_the_target_mode(self, two_mode_world, edits):
        for method in ("dds", "ids"):
            hits = sum(two_mode_world.nearest_label(pair[method][0].z_trg) == 1 for _, pair in edits)
            assert hits >= 0.9 * self.SEEDS

    def test_ids_keeps_more_identity(self, two_mode_world, edits):
        dds = np.array([nearest_residual(two_mode_world, pair["dds"][0].z_trg, task.z_src) for task, pair in edits])
        ids = np.array([nearest_residual(two_mode_world, pair["ids"][0].z_trg, task.z_src) for task, pair in edits])
        assert np.count_nonzero(ids < dds) >= 0.8 * self.SEEDS
        assert ids.mean() < dds.mean()

    def test_ids_inverts_better(self, two_mode_world, edits):
        errors = {}
        for method in ("dds", "ids"):
            errors[method] = np.mean([
                mse(invert(two_mode_world.backend, pair[method][0], task, pair[method][1]), task.z_src)
                for task, pair in edits
            ])
        assert errors["ids"] < errors["dds"]


@pytest.mark.slow
def test_trained_denoiser_edit(two_mode_world):
    mlp = MlpDenoiserBackend.initialize((2,), 2, [64, 64], NoiseSchedule(), Rng(0))
    trained, _ = train_denoiser(mlp, two_mode_world.training_pairs(Rng(1), 200), NoiseSchedule(), Rng(2),
                                epochs=400, lr=0.05)
    task = source_task(two_mode_world, 0)
    result = edit(trained, task, DistillConfig(method="ids", steps=200))
    assert len(result.grad_norms) == 200
    assert all(math.isfinite(g) for g in result.grad_norms)
    assert len(result.fpr_final_losses) == 200
    assert all(math.isfinite(v) for v in result.fpr_final_losses)
