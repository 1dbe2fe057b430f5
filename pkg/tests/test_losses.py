"""Objectives: hand-computed values, invariances, finite-difference checks."""

import numpy as np
import pytest

from fmarobust import losses as L
from fmarobust import model as M
from fmarobust import tensor as T
from fmarobust.errors import ContractError, DimensionError

from util import analytic_gradients, fd_gradient, rel_err


def toy_model(seed=0):
    desc = M.ArchitectureDescriptor(
        input_hwc=(8, 8, 1), blocks=((2, 1), (2, 1)), dense_widths=(),
        class_count=3, tap_policy="blocks")
    return M.init_model(desc, seed=seed)


def logp_of(rows):
    return T.softmax_logp(T.constant(np.asarray(rows, dtype=np.float64)))


class TestCrossEntropy:
    def test_perfect_prediction(self):
        # exact zero when the correct log-probability is exactly 0
        exact = T.constant(np.array([[0.0, -50.0]]))
        assert L.cross_entropy(exact, [0]).array.item() == 0.0

    def test_uniform_ten_classes(self):
        logp = logp_of([[0.0] * 10])
        got = L.cross_entropy(logp, [4]).array.item()
        assert abs(got - np.log(10.0)) < 1e-12

    def test_half_probability(self):
        exact = T.constant(np.log(np.array([[0.5, 0.5]])))
        got = L.cross_entropy(exact, [0]).array.item()
        assert abs(got - np.log(2.0)) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            L.cross_entropy(logp_of([[0.0, 0.0]]), [2])

    def test_batch_mean(self):
        lp = T.constant(np.log(np.array([[0.5, 0.5], [0.25, 0.75]])))
        got = L.cross_entropy(lp, [0, 1]).array.item()
        want = (np.log(2.0) + -np.log(0.75)) / 2.0
        assert abs(got - want) < 1e-12


class TestFmaLoss:
    def test_equal_taps_exactly_zero(self):
        taps = [T.constant(np.random.default_rng(0).random((2, 3, 4, 4)))]
        assert L.fma_loss(taps, taps).array.item() == 0.0

    def test_hand_case_single_element(self):
        clean = [T.constant(np.array([[2.0]]))]
        aug = [T.constant(np.array([[1.0]]))]
        assert abs(L.fma_loss(clean, aug).array.item() - 0.25) < 1e-12

    def test_hand_case_two_elements(self):
        clean = [T.constant(np.array([[1.0, 3.0]]))]
        aug = [T.constant(np.array([[1.0, 1.0]]))]
        assert abs(L.fma_loss(clean, aug).array.item() - 0.5) < 1e-12

    def test_joint_rescaling_invariance(self):
        rng = np.random.default_rng(42)
        clean = rng.random((2, 2, 3, 3)) + 0.5
        aug = rng.random((2, 2, 3, 3)) + 0.5
        base = L.fma_loss([T.constant(clean)], [T.constant(aug)]).array.item()
        for c in rng.uniform(0.1, 10.0, size=8):
            scaled = L.fma_loss([T.constant(c * clean)],
                                [T.constant(c * aug)]).array.item()
            assert abs(scaled - base) <= 1e-10 * max(1.0, abs(base))

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            clean = rng.random((2, 5)) + 0.1
            aug = clean + rng.standard_normal((2, 5)) * 0.1
            v = L.fma_loss([T.constant(clean)], [T.constant(np.clip(aug, 0, None))])
            assert v.array.item() >= 0.0

    def test_batch_is_mean_of_singletons(self):
        rng = np.random.default_rng(3)
        c = rng.random((4, 6)) + 0.2
        a = rng.random((4, 6)) + 0.2
        whole = L.fma_loss([T.constant(c)], [T.constant(a)]).array.item()
        singles = [L.fma_loss([T.constant(c[i:i+1])],
                              [T.constant(a[i:i+1])]).array.item()
                   for i in range(4)]
        assert abs(whole - np.mean(singles)) < 1e-12

    def test_epsilon_guard_on_dead_tap(self):
        clean = [T.constant(np.zeros((1, 4)))]
        aug = [T.constant(np.full((1, 4), 0.5))]
        v = L.fma_loss(clean, aug, epsilon_mean=1e-8).array.item()
        assert np.isfinite(v) and v > 0.0

    def test_mismatched_shapes(self):
        with pytest.raises(DimensionError):
            L.fma_loss([T.constant(np.zeros((1, 3)))],
                       [T.constant(np.zeros((1, 4)))])
        with pytest.raises(ContractError):
            L.fma_loss([], [])


class TestStLoss:
    def test_identical_distributions_zero(self):
        lp = logp_of([[0.3, -0.2, 1.0]])
        assert L.st_loss(lp, lp).array.item() == 0.0

    def test_hand_kl(self):
        # P_clean ~ (1, 0), P_aug = (1/2, 1/2): KL = ln 2
        lpc = T.constant(np.array([[0.0, -745.0]]))  # exp(-745) underflows to 5e-324
        lpa = T.constant(np.log(np.array([[0.5, 0.5]])))
        got = L.st_loss(lpc, lpa).array.item()
        assert abs(got - np.log(2.0)) < 1e-9

    def test_gibbs_inequality_fuzz(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            lpc = logp_of(rng.standard_normal((3, 5)) * 3)
            lpa = logp_of(rng.standard_normal((3, 5)) * 3)
            assert L.st_loss(lpc, lpa).array.item() >= 0.0

    def test_l2_variant(self):
        lpc = T.constant(np.log(np.array([[0.5, 0.5]])))
        lpa = T.constant(np.log(np.array([[0.25, 0.75]])))
        got = L.st_loss(lpc, lpa, distance="l2").array.item()
        assert abs(got - (0.25 ** 2 + 0.25 ** 2)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            L.st_loss(logp_of([[0.0, 0.0]]), logp_of([[0.0, 0.0, 0.0]]))


class TestTotalLoss:
    def setup_method(self):
        self.model = toy_model(seed=1)
        rng = np.random.default_rng(5)
        self.clean = rng.random((3, 1, 8, 8))
        self.aug = np.clip(self.clean + rng.standard_normal(self.clean.shape) * 0.05,
                           0.0, 1.0)
        self.labels = np.array([0, 2, 1])

    def _j0(self):
        logits, _ = M.forward(self.model, self.clean)
        return L.cross_entropy(T.softmax_logp(logits), self.labels).array.item()

    def test_fma_gamma_zero_equals_j0(self):
        cfg = L.LossConfig(method="fma", gamma=0.0)
        got = L.total_loss(cfg, self.model, self.clean, self.aug, self.labels)
        assert got.array.item() == self._j0()

    def test_fma_identical_batches_equals_j0(self):
        cfg = L.LossConfig(method="fma", gamma=2.5)
        got = L.total_loss(cfg, self.model, self.clean, self.clean, self.labels)
        assert abs(got.array.item() - self._j0()) < 1e-12

    def test_at_is_ce_over_concatenation(self):
        cfg = L.LossConfig(method="at")
        got = L.total_loss(cfg, self.model, self.clean, self.aug, self.labels)
        both = np.concatenate([self.clean, self.aug])
        logits, _ = M.forward(self.model, both)
        want = L.cross_entropy(T.softmax_logp(logits),
                               np.concatenate([self.labels, self.labels]))
        assert abs(got.array.item() - want.array.item()) < 1e-12

    def test_misaligned_batches(self):
        cfg = L.LossConfig(method="fma")
        with pytest.raises(ContractError):
            L.total_loss(cfg, self.model, self.clean, self.aug[:2], self.labels)
        with pytest.raises(ContractError):
            L.total_loss(cfg, self.model, self.clean, self.aug, [0, 1])

    def test_st_adds_weighted_regularizer(self):
        cfg = L.LossConfig(method="st", st_weight=0.0)
        got = L.total_loss(cfg, self.model, self.clean, self.aug, self.labels)
        assert got.array.item() == self._j0()


class TestGradientsVsFiniteDifferences:
    """Each loss's analytic gradient against central differences on a toy
    CNN; the 5-seed sweep lives in the acceptance suite."""

    def check(self, method, **cfg_kwargs):
        model = toy_model(seed=3)
        rng = np.random.default_rng(17)
        clean = rng.random((2, 1, 8, 8))
        aug = np.clip(clean + rng.standard_normal(clean.shape) * 0.08, 0.0, 1.0)
        labels = np.array([1, 2])
        cfg = L.LossConfig(method=method, **cfg_kwargs)

        nodes = M.make_param_nodes(model)
        loss = L.total_loss(cfg, model, clean, aug, labels, param_nodes=nodes)
        grads = analytic_gradients(loss, nodes)

        def loss_value():
            return L.total_loss(cfg, model, clean, aug, labels).array.item()

        worst = 0.0
        for name, tensor in model.params.items():
            fd = fd_gradient(loss_value, tensor)
            worst = max(worst, rel_err(grads[name], fd))
        assert worst < 1e-4, f"{method}: max rel err {worst}"

    def test_ce_only(self):
        self.check("fma", gamma=0.0)

    def test_fma_total(self):
        self.check("fma", gamma=0.7)

    def test_st_total(self):
        self.check("st", st_weight=0.9)

    def test_at_total(self):
        self.check("at")
