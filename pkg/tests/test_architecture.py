import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fairmedl import autodiff as ad
from fairmedl.architecture import (ADVERSARY_PARTS, VARIANTS, ModelStack, StackConfig, assemble,
                                   mix)
from fairmedl.autodiff import Tensor
from fairmedl.errors import ConfigurationError, ContractError, DimensionError


def _config(**kw):
    base = dict(n_features=5, n_clusters=4, sensitive={"s": 2, "age": 3}, seed=3)
    base.update(kw)
    return StackConfig(**base)


class TestConstruction:
    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            ModelStack("bayes", _config())

    def test_unknown_task(self):
        with pytest.raises(ConfigurationError):
            _config(task="ranking")

    @pytest.mark.parametrize("variant", list(VARIANTS))
    def test_parts_present_exactly(self, variant):
        stack = assemble(variant, _config())
        for part in ("fe", "cluster_adv", "debias_fe", "debias_me", "re", "zpred"):
            assert (getattr(stack, part) is not None) == (part in VARIANTS[variant]), part

    @pytest.mark.parametrize("variant", list(VARIANTS))
    def test_parameter_count_is_sum_of_parts(self, variant):
        stack = assemble(variant, _config())
        total = sum(stack.count_parameters([p]) for p in stack.parts)
        assert stack.count_parameters() == total > 0

    def test_fe_weights_shared_across_variants(self):
        """Adding subnetworks must not perturb the FE initialization."""
        a = assemble("base", _config()).state_dict()
        b = assemble("fair_medl", _config()).state_dict()
        for name, value in a.items():
            assert np.array_equal(value, b[name])

    def test_armed_is_fair_medl_without_debiasers(self):
        armed = assemble("armed", _config()).state_dict()
        fm = assemble("fair_medl", _config())
        fm_main = {n: p.data for n, p in fm.named_parameters()
                   if not n.startswith(("debias_fe", "debias_me"))}
        assert set(armed) == set(fm_main)
        assert all(np.array_equal(armed[k], fm_main[k]) for k in armed)

    def test_wrong_feature_count(self, rng):
        with pytest.raises(ContractError):
            assemble("base", _config()).fe_forward(rng.normal(size=(3, 4)))

    def test_adversary_parts_listed(self):
        assert set(ADVERSARY_PARTS) == {"cluster_adv", "debias_fe", "debias_me"}


class TestMixing:
    def test_zero_random_effects_give_fe_output(self, rng):
        stack = assemble("armed", _config())
        g, eta_F = stack.fe_forward(rng.normal(size=(7, 5)))
        zero = (Tensor(np.zeros((7, g.shape[1]))), Tensor(np.zeros((7, 1))))
        eta_M = stack.me_forward(g, eta_F, u=zero)
        assert np.max(np.abs(eta_M.data - eta_F.data)) <= 1e-12

    def test_matches_slope_intercept_form(self, rng):
        stack = assemble("armed", _config())
        g, eta_F = stack.fe_forward(rng.normal(size=(6, 5)))
        us, ui = rng.normal(size=g.shape), rng.normal(size=(6, 1))
        W, b = stack.fe.head.W.data, stack.fe.head.b.data
        ref = (g.data * (1 + us)) @ W + b + ui
        got = mix(g, eta_F, stack.fe.head, Tensor(us), Tensor(ui)).data
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_saturated_logits_give_bounded_probabilities(self, rng):
        stack = assemble("armed", _config())
        probs = stack.output(Tensor(np.array([-800.0, 0.0, 800.0]))).data
        assert probs.tolist() == [0.0, 0.5, 1.0]

    def test_me_forward_rejects_unseen_cluster(self, rng):
        stack = assemble("armed", _config())
        g, eta_F = stack.fe_forward(rng.normal(size=(2, 5)))
        with pytest.raises(ContractError):
            stack.me_forward(g, eta_F, np.array([0, 4]))

    def test_base_has_no_me_head(self, rng):
        stack = assemble("base", _config())
        g, eta_F = stack.fe_forward(rng.normal(size=(2, 5)))
        with pytest.raises(ContractError):
            stack.me_forward(g, eta_F, np.array([0, 1]))


class TestRandomEffects:
    def test_sampling_moments(self):
        stack = assemble("armed", _config(n_clusters=2, re_init_logvar=np.log(0.25)))
        stack.re.mu_slope.data[...] = 1.5
        z = np.zeros(200_000, dtype=int)
        us, ui = stack.re.sample(z, np.random.default_rng(0))
        assert us.data.mean() == pytest.approx(1.5, abs=0.005)
        assert us.data.std() == pytest.approx(0.5, abs=0.005)
        assert ui.data.std() == pytest.approx(0.5, abs=0.005)

    def test_means_without_rng(self):
        stack = assemble("armed", _config())
        stack.re.mu_int.data[:, 0] = [0.1, 0.2, 0.3, 0.4]
        _, ui = stack.re.sample(np.array([3, 0]), None)
        np.testing.assert_array_equal(ui.data[:, 0], [0.4, 0.1])

    def test_kl_zero_at_prior(self):
        stack = assemble("armed", _config(re_init_logvar=0.0))
        assert stack.re.kl().item() == pytest.approx(0.0, abs=1e-12)

    def test_nonpositive_prior(self):
        with pytest.raises(ConfigurationError):
            assemble("armed", _config(prior_var=0.0))


class TestOODInference:
    def _stack(self):
        stack = assemble("armed", _config())
        stack.zpred_trained = True
        stack.re.mu_slope.data[...] = np.random.default_rng(1).normal(size=stack.re.mu_slope.shape)
        stack.re.mu_int.data[:, 0] = [1.0, -2.0, 0.5, 3.0]
        return stack

    def test_requires_trained_zpredictor(self, rng):
        stack = assemble("armed", _config())
        with pytest.raises(ContractError):
            stack.ood_infer(rng.normal(size=(2, 5)))

    def test_uniform_membership_averages_means(self, rng):
        stack = self._stack()
        last = stack.zpred.net.layers[-1]
        last.W.data[...] = 0.0
        last.b.data[...] = 0.0
        _, ui = stack.ood_random_effects(rng.normal(size=(3, 5)))
        np.testing.assert_allclose(ui.data[:, 0], 0.625, atol=1e-12)

    def test_one_hot_membership_picks_cluster(self, rng):
        stack = self._stack()
        last = stack.zpred.net.layers[-1]
        last.W.data[...] = 0.0
        last.b.data[...] = [[0.0, 0.0, 900.0, 0.0]]
        x = rng.normal(size=(3, 5))
        g, eta_F = stack.fe_forward(x)
        expected = stack.me_forward(g, eta_F, np.full(3, 2))
        np.testing.assert_allclose(stack.ood_infer(x).data, expected.data, atol=1e-12)

    @given(st.integers(0, 1000))
    def test_membership_on_simplex(self, seed):
        stack = assemble("armed", _config())
        p = stack.zpred(Tensor(np.random.default_rng(seed).normal(size=(4, 5)) * 10)).data
        assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_predict_me_without_clusters_uses_ood(self, rng):
        stack = self._stack()
        x = rng.normal(size=(4, 5))
        np.testing.assert_allclose(stack.predict(x, "me"),
                                   ad.sigmoid(stack.ood_infer(x)).data.ravel(), atol=1e-15)

    def test_predict_unknown_head(self, rng):
        with pytest.raises(ConfigurationError):
            assemble("base", _config()).predict(rng.normal(size=(2, 5)), head="avg")


class TestCheckpoints:
    def test_round_trip(self, tmp_path, rng):
        stack = assemble("fair_medl", _config())
        for p in stack.parameters():
            p.data[...] = rng.normal(size=p.shape)
        stack.trained = stack.zpred_trained = True
        stack.save(tmp_path / "m.npz")
        back = ModelStack.load(tmp_path / "m.npz")
        assert back.variant == "fair_medl" and back.trained and back.zpred_trained
        x = rng.normal(size=(5, 5))
        assert np.array_equal(back.predict(x, "me", np.arange(5) % 4),
                              stack.predict(x, "me", np.arange(5) % 4))

    def test_missing_parameter(self):
        stack = assemble("armed", _config())
        state = stack.state_dict()
        state.pop("re.mu_int")
        with pytest.raises(ContractError):
            stack.load_state_dict(state)

    def test_shape_mismatch(self):
        stack = assemble("armed", _config())
        state = stack.state_dict()
        state["re.mu_int"] = np.zeros((9, 1))
        with pytest.raises(DimensionError):
            stack.load_state_dict(state)
