import numpy as np
import pytest

from bipprune.baselines import (ImpSchedule, ScheduleError, at_init_run, hydra_run, imp_run,
                                magnitude_mask, omp_run, random_mask, snip_mask, train_dense)
from bipprune.bip import BipConfig, bip_train
from bipprune.masking import GroupMap, build_group_map, make_target
from bipprune.models import build_network, init_params
from bipprune.tensor import NumericError
from bipprune.training import RetrainConfig


def element_map(n):
    return GroupMap(np.arange(n), np.zeros(n, dtype=np.int64))


class TestMagnitude:
    def test_ranking(self):
        gm = element_map(3)
        mask = magnitude_mask(np.array([3.0, -5.0, 1.0]), make_target(1 / 3, gm), gm)
        np.testing.assert_array_equal(mask, [1, 1, 0])

    def test_scale_invariance(self, rng):
        gm = element_map(20)
        theta = rng.standard_normal(20)
        t = make_target(0.6, gm)
        np.testing.assert_array_equal(magnitude_mask(theta, t, gm), magnitude_mask(7 * theta, t, gm))

    def test_equal_magnitudes_keep_lowest(self):
        gm = element_map(4)
        np.testing.assert_array_equal(magnitude_mask(np.ones(4), make_target(0.5, gm), gm),
                                      [1, 1, 0, 0])


class TestRandomAndSnip:
    def test_random_exact_k_and_seeded(self):
        gm = element_map(100)
        t = make_target(0.5, gm)
        a, b = random_mask(t, gm, 0), random_mask(t, gm, 1)
        assert a.sum() == 50 and not np.array_equal(a, b)
        np.testing.assert_array_equal(a, random_mask(t, gm, 0))

    def test_random_p0(self):
        gm = element_map(10)
        assert random_mask(make_target(0.0, gm), gm, 3).all()

    def test_snip_zero_gradient_tie_rule(self, small_blobs):
        net = build_network("mlp-small", 4, 4)
        gm = build_group_map(net)
        mask = snip_mask(net, np.zeros(net.n), small_blobs[0], make_target(0.9, gm), gm)
        k = make_target(0.9, gm).k
        np.testing.assert_array_equal(np.flatnonzero(mask), np.arange(k))

    def test_snip_prefers_larger_weights(self, small_blobs):
        net = build_network("mlp-small", 4, 4)
        gm = build_group_map(net)
        theta = init_params(net, 0)
        s = net.slot(4, "bias")   # output biases share the same gradient scale per class
        base = snip_mask(net, theta, small_blobs[0], make_target(0.5, gm), gm)
        theta2 = theta.copy()
        theta2[s.offset] *= 1e6
        assert snip_mask(net, theta2, small_blobs[0], make_target(0.5, gm), gm)[s.offset] == 1
        assert base.sum() == make_target(0.5, gm).k


class TestDense:
    def test_zero_lr_keeps_theta(self, small_blobs):
        net = build_network("mlp-small", 4, 4)
        theta0 = init_params(net, 0)
        theta, snaps = train_dense(net, *small_blobs, RetrainConfig(epochs=2, lr=0.0), theta0)
        np.testing.assert_array_equal(theta, theta0)
        np.testing.assert_array_equal(snaps[0].params, theta0)
        assert [s.epoch for s in snaps] == [0, 1]

    def test_divergence_aborts(self, small_blobs):
        net = build_network("mlp-small", 4, 4)
        with pytest.raises(NumericError):
            with np.errstate(all="ignore"):
                train_dense(net, *small_blobs, RetrainConfig(epochs=5, lr=1e4),
                            init_params(net, 0))


@pytest.fixture(scope="module")
def pretrained(small_blobs):
    net = build_network("mlp-small", 4, 4)
    gm = build_group_map(net)
    dense = RetrainConfig(epochs=4, seed=0)
    theta0 = init_params(net, 0)
    theta, snaps = train_dense(net, *small_blobs, dense, theta0)
    return net, gm, dense, theta0, theta, snaps[1].params


class TestPipelines:
    retrain = RetrainConfig(epochs=3, schedule="step")

    def test_omp_masked_weights_zero(self, pretrained, small_blobs):
        net, gm, _, _, theta, rewind = pretrained
        target = make_target(0.8, gm)
        mask, w, rec = omp_run(net, *small_blobs, target, gm, self.retrain, theta, rewind)
        assert mask.sum() == target.k and not w[mask == 0].any()
        assert abs(rec.realized_sparsity - (1 - mask.sum() / net.n)) < 1 / net.n

    def test_omp_p0_keeps_everything(self, pretrained, small_blobs):
        net, gm, _, _, theta, rewind = pretrained
        mask, _, _ = omp_run(net, *small_blobs, make_target(0.0, gm), gm, self.retrain,
                             theta, rewind)
        assert mask.all()

    def test_imp_one_round_equals_omp(self, pretrained, small_blobs):
        net, gm, dense, theta0, theta, rewind = pretrained
        target = make_target(0.8, gm)
        m_omp, w_omp, _ = omp_run(net, *small_blobs, target, gm, self.retrain, theta, rewind)
        m_imp, w_imp, _ = imp_run(net, *small_blobs, ImpSchedule(0.8, 1), self.retrain, theta0,
                                  gm, target, dense)
        np.testing.assert_array_equal(m_omp, m_imp)
        np.testing.assert_array_equal(w_omp, w_imp)

    def test_imp_reproducible_and_nested(self, pretrained, small_blobs):
        net, gm, dense, theta0, *_ = pretrained
        target = make_target(0.9, gm)
        a = imp_run(net, *small_blobs, ImpSchedule(0.9, 3), self.retrain, theta0, gm, target, dense)
        b = imp_run(net, *small_blobs, ImpSchedule(0.9, 3), self.retrain, theta0, gm, target, dense)
        np.testing.assert_array_equal(a[1], b[1])
        assert a[0].sum() == target.k

    def test_imp_cost_linear_in_rounds(self, pretrained, small_blobs):
        net, gm, dense, theta0, *_ = pretrained
        target = make_target(0.9, gm)
        evals = [imp_run(net, *small_blobs, ImpSchedule(0.9, t), self.retrain, theta0, gm, target,
                         dense)[2].theta_grad_evals for t in (1, 2, 3)]
        assert evals[1] - evals[0] == evals[2] - evals[1] > 0

    def test_random_and_snip_pipelines(self, pretrained, small_blobs):
        net, gm, _, theta0, *_ = pretrained
        target = make_target(0.7, gm)
        for method in ("random", "snip"):
            mask, w, rec = at_init_run(method, net, *small_blobs, target, gm, self.retrain, theta0)
            assert mask.sum() == target.k and not w[mask == 0].any()
            assert rec.method == method

    def test_hydra_freezes_theta_in_phase_one(self, pretrained, small_blobs):
        net, gm, _, _, theta, _ = pretrained
        before = theta.copy()
        target = make_target(0.8, gm)
        cfg = BipConfig(epochs=3, batch_size=32)
        mask, w, rec = hydra_run(net, *small_blobs, target, gm, cfg, theta, self.retrain)
        np.testing.assert_array_equal(theta, before)
        np.testing.assert_array_equal(rec.extras["phase1_theta"], before)
        assert mask.sum() == target.k

    def test_hydra_zero_epochs_projects_init_scores(self, pretrained, small_blobs):
        net, gm, _, _, theta, _ = pretrained
        target = make_target(0.8, gm)
        mask, _, _ = hydra_run(net, *small_blobs, target, gm, BipConfig(epochs=0), theta,
                               self.retrain)
        np.testing.assert_array_equal(mask, magnitude_mask(theta, target, gm))

    def test_hydra_cost_two_phases(self, pretrained, small_blobs):
        net, gm, _, _, theta, _ = pretrained
        target = make_target(0.8, gm)
        cfg = BipConfig(epochs=3, batch_size=64)
        _, _, h = hydra_run(net, *small_blobs, target, gm, cfg, theta,
                            RetrainConfig(epochs=3, batch_size=64))
        _, _, b = bip_train(net, small_blobs[0], small_blobs[1], target, gm, cfg, theta)
        assert h.train_epochs == 2 * b.train_epochs
        assert h.total_grad_evals == b.total_grad_evals


class TestImpSchedule:
    def test_fractions(self):
        np.testing.assert_allclose(ImpSchedule(0.9, 3).retained_fractions(),
                                   [0.464, 0.215, 0.100], atol=1e-3)

    def test_counts_monotone_and_exact_final(self):
        ks = ImpSchedule(0.9, 4).group_counts(1000, 100)
        assert ks == sorted(ks, reverse=True) and ks[-1] == 100

    def test_k_reaches_zero(self):
        with pytest.raises(ScheduleError):
            ImpSchedule(0.99, 3).group_counts(5, 1)

    def test_rounds_positive(self):
        with pytest.raises(ScheduleError):
            ImpSchedule(0.5, 0)
