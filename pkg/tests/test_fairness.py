import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fairmedl import fairness as F
from fairmedl.errors import ContractError


def _gp(preds, labels, group, scores=None, names=None):
    preds = np.asarray(preds, float)
    return F.GroupedPredictions(preds if scores is None else scores, labels, group, preds, names)


class TestDemographicParity:
    def test_two_groups_worked_example(self):
        # group 0 predicts positive 60% of the time, group 1 40%.
        preds = [1, 1, 1, 0, 0] + [1, 1, 0, 0, 0]
        gp = _gp(preds, [1, 0] * 5, [0] * 5 + [1] * 5)
        assert F.demographic_parity_cls(gp).value == pytest.approx(0.2)

    def test_three_groups_pairwise_mean(self):
        gp = _gp([1, 1, 0, 0, 1, 0], [1, 0, 1, 0, 1, 0], [0, 0, 1, 1, 2, 2])
        # rates 1.0, 0.0, 0.5 -> gaps 1.0, 0.5, 0.5
        assert F.demographic_parity_cls(gp).value == pytest.approx(2 / 3)

    def test_regression_uses_group_means(self):
        gp = F.GroupedPredictions([1.0, 3.0, 10.0, 12.0], [0, 0, 0, 0], ["a", "a", "b", "b"])
        assert F.demographic_parity_reg(gp).value == pytest.approx(9.0)

    def test_requires_hard_predictions(self):
        gp = F.GroupedPredictions([0.1, 0.9], [0, 1], [0, 1])
        with pytest.raises(ContractError):
            F.demographic_parity_cls(gp)


class TestEqualizedOdds:
    def test_rates_and_population_sd(self):
        labels = [1, 1, 0, 0, 1, 1, 0, 0]
        preds = [1, 1, 1, 0, 1, 0, 0, 0]
        group = [0, 0, 0, 0, 1, 1, 1, 1]
        tpr_sd, fpr_sd = F.equalized_odds_sd(_gp(preds, labels, group))
        assert tpr_sd == pytest.approx(np.std([1.0, 0.5]))
        assert fpr_sd == pytest.approx(np.std([0.5, 0.0]))

    def test_undefined_rate_flagged_and_excluded(self):
        labels = [1, 0, 1, 0, 0, 0]
        preds = [1, 0, 0, 0, 1, 0]
        group = [0, 0, 1, 1, 2, 2]
        tpr, fpr = F.equalized_odds_values(_gp(preds, labels, group, names=["a", "b", "c"]))
        assert any("c" in f and "TPR" in f for f in tpr.flags)
        assert np.isnan(tpr.breakdown["c"])
        assert tpr.value == pytest.approx(np.std([1.0, 0.0]))
        assert fpr.value == pytest.approx(np.std([0.0, 0.0, 0.5]))

    def test_single_category_rejected(self):
        with pytest.raises(ContractError, match="2 categories"):
            F.equalized_odds_sd(_gp([1, 0], [1, 0], [0, 0]))

    def test_single_label_class_rejected(self):
        with pytest.raises(ContractError):
            F.equalized_odds_sd(_gp([1, 0], [1, 1], [0, 1]))

    def test_mse_sd(self):
        gp = F.GroupedPredictions([1.0, 1.0, 0.0, 2.0], [0.0, 0.0, 0.0, 0.0], [0, 0, 1, 1])
        # per-group MSE 1.0 and 2.0
        assert F.equalized_odds_mse_sd(gp).value == pytest.approx(0.5)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            F.GroupedPredictions([0.1, 0.2], [0, 1, 1], [0, 1])


class TestCounterfactual:
    def test_mean_absolute_gap(self):
        f = np.array([0.2, 0.8])
        cf = np.array([[0.3, 0.6], [0.8, 0.5]])
        v = F.counterfactual_fairness_cls(f, cf)
        assert v.value == pytest.approx((0.1 + 0.4 + 0.0 + 0.3) / 4)
        assert v.breakdown["max_gap"] == pytest.approx(0.4)

    def test_identical_scores_are_zero(self, rng):
        s = rng.uniform(size=10)
        assert F.counterfactual_fairness_reg(s, s).value == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            F.counterfactual_fairness_cls(np.zeros(3), np.zeros((2, 1)))


class TestThreshold:
    def test_passes(self):
        v = F.FairnessValue("DP", 0.05)
        assert v.passes(0.1) and not v.passes(0.01)


class TestBundle:
    def test_classification_keys(self):
        gp = _gp([1, 0, 1, 0], [1, 0, 1, 0], [0, 0, 1, 1])
        assert set(F.fairness_metrics(gp, "classification", np.zeros(4))) == {
            "TPR_SD", "FPR_SD", "DP", "CF"}

    def test_regression_keys(self):
        gp = F.GroupedPredictions([1.0, 0.0, 2.0, 1.0], [1.0, 0.0, 1.0, 0.0], [0, 0, 1, 1])
        assert set(F.fairness_metrics(gp, "regression")) == {"MSE_SD", "DP"}


@st.composite
def _instances(draw):
    n = draw(st.integers(4, 40))
    k = draw(st.integers(2, 4))
    seed = draw(st.integers(0, 2 ** 31 - 1))
    r = np.random.default_rng(seed)
    group = np.concatenate([np.arange(k), r.integers(0, k, n - k)])
    labels = np.concatenate([[0, 1], r.integers(0, 2, n - 2)])
    return r.integers(0, 2, n).astype(float), labels.astype(float), group


class TestInvariants:
    @given(_instances())
    def test_dp_bounded_and_relabel_invariant(self, inst):
        preds, labels, group = inst
        v = F.demographic_parity_cls(_gp(preds, labels, group)).value
        perm = np.random.default_rng(0).permutation(group.max() + 1)
        v2 = F.demographic_parity_cls(_gp(preds, labels, perm[group])).value
        assert 0.0 <= v <= 1.0 and v == pytest.approx(v2, abs=1e-15)

    @given(_instances())
    def test_dp_zero_when_predictions_constant(self, inst):
        _, labels, group = inst
        assert F.demographic_parity_cls(_gp(np.ones_like(labels), labels, group)).value == 0.0

    @given(_instances())
    def test_row_order_invariant(self, inst):
        preds, labels, group = inst
        order = np.random.default_rng(1).permutation(labels.size)
        a = F.demographic_parity_cls(_gp(preds, labels, group)).value
        b = F.demographic_parity_cls(_gp(preds[order], labels[order], group[order])).value
        assert a == pytest.approx(b, abs=1e-15)

    @given(_instances())
    def test_dp_matches_pairwise_brute_force(self, inst):
        preds, labels, group = inst
        cats = np.unique(group)
        rates = [preds[group == c].mean() for c in cats]
        ref = np.mean([abs(a - b) for a, b in itertools.combinations(rates, 2)])
        assert F.demographic_parity_cls(_gp(preds, labels, group)).value == pytest.approx(ref,
                                                                                          abs=1e-15)
