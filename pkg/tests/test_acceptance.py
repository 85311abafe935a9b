#!/usr/bin/env python
"""
大規模データでの受け入れテスト

いずれも数分かかるため slow マーカーを付けています（pytest -m slow で実行）。
"""

import numpy as np
import pytest

from src.analytics import credible_interval_coverage, ks_statistic, ordered_lorenz, posterior_premiums, premium_by_claim_history
from src.ecm_fitter import FitConfig, fit, gating_gradient_hessian, q1_objective
from src.experts import GammaExpert
from src.mixed_lrmoe import Dataset, MixedLRMoEModel, RandomEffectDesign, RandomEffectsRealization, log_gating
from src.simulation import preset_spec, simulate
from src.variational import VariationalPosterior, grad_wrt_w, level_objective_and_gradient, sample_w

pytestmark = pytest.mark.slow


class TestSingleLevelRecovery:
    """1レベル設計での真値の復元のテストクラス"""

    def setup_method(self):
        self.truth = simulate(preset_spec("design_one", n=20000, seed=11, S=(100,)))
        self.model, self.post, self.report = fit(self.truth.dataset, FitConfig(g=2, M=5, max_ecm_iters=50, seed=0))

    def test_parameters_and_fit(self):
        true_model = self.truth.model
        np.testing.assert_allclose(self.model.alpha[0], true_model.alpha[0], atol=0.2)
        for j in range(2):
            fitted = self.model.experts[j][0]
            expected = true_model.experts[j][0]
            assert fitted.shape == pytest.approx(expected.shape, rel=0.15)
            assert fitted.scale == pytest.approx(expected.scale, rel=0.15)
        assert ks_statistic(self.truth.dataset, self.model, self.post, 200, 0) < 0.02

        # 95% 信用区間が真のランダム効果を含む割合
        fraction, _ = credible_interval_coverage(self.post, self.truth.w, 0.95)
        assert fraction >= 0.85

        assert np.all(self.model.alpha[-1] == 0.0)
        assert np.all(self.model.beta[-1] == 0.0)
        assert self.model.beta[0, 0] == 1.0


def test_sparser_level_has_wider_intervals():
    """観測の少ないレベルほど95%信用区間の平均幅が広い"""
    truth = simulate(preset_spec("design_two", n=20000, seed=12, S=(100, 1000)))
    _, post, _ = fit(truth.dataset, FitConfig(g=3, M=5, max_ecm_iters=50, seed=0))
    _, width_one = credible_interval_coverage(post, truth.w, 0.95, level=0)
    _, width_two = credible_interval_coverage(post, truth.w, 0.95, level=1)
    assert width_two > width_one


def test_claims_raise_posterior_premium():
    """請求のある契約者の平均事後純保険料が請求のない契約者より20%以上高い"""
    truth = simulate(preset_spec("ratemaking", seed=13))
    data = truth.dataset
    model, post, _ = fit(data, FitConfig(g=2, experts="zilognormal", M=5, max_ecm_iters=50, seed=0))

    summary = premium_by_claim_history(data, model, post, 200, 0)
    assert summary["relative_loading"] >= 0.2

    premiums = posterior_premiums(data, model, post, 200, 0)
    losses = data.Y[:, 0]
    curve = ordered_lorenz(premiums, losses, n_bootstrap=0)
    order = np.argsort(premiums, kind="stable")
    x = np.concatenate([[0.0], np.cumsum(premiums[order]) / premiums.sum()])
    y = np.concatenate([[0.0], np.cumsum(losses[order]) / losses.sum()])
    direct = 1.0 - np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]))
    assert curve.gini > 0
    assert curve.gini == pytest.approx(direct, abs=1e-12)


def _random_instance(rng):
    """g = 3、2レベルのランダムなモデル・データ・w・責任度を作る"""
    design = RandomEffectDesign(S=(3, 4))
    n = int(rng.integers(20, 40))
    alpha = np.vstack([rng.normal(size=(2, 2)), np.zeros((1, 2))])
    beta = np.vstack([np.ones(2), rng.normal(size=2), np.zeros(2)])
    experts = tuple((GammaExpert(shape=float(rng.uniform(1.0, 6.0)), scale=float(rng.uniform(0.5, 20.0))),) for _ in range(3))
    model = MixedLRMoEModel(alpha=alpha, beta=beta, experts=experts, design=design)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    Y = rng.gamma(2.0, 5.0, size=n)
    factor_index = np.column_stack([rng.permutation(np.arange(n) % size) for size in design.S])
    data = Dataset(X=X, Y=Y, factor_index=factor_index, design=design)
    w = RandomEffectsRealization(w=tuple(rng.normal(size=size) for size in design.S))
    z = rng.dirichlet(np.ones(3), size=n)
    post = VariationalPosterior(
        mu=tuple(rng.normal(scale=0.5, size=size) for size in design.S),
        sigma2=tuple(rng.uniform(0.2, 1.5, size=size) for size in design.S),
    )
    return model, data, w, z, post


def _shifted_w(w, level, s, h):
    values = [np.array(level_w, copy=True) for level_w in w.w]
    values[level][s] += h
    return RandomEffectsRealization(w=tuple(values))


class TestDerivativesOnRandomInstances:
    """ランダムな50インスタンスで解析的な勾配・ヘッセ行列が中心差分と一致することのテストクラス"""

    h = 1e-5
    rel = 1e-5
    abs_floor = 1e-6

    def _close(self, analytic, numeric):
        assert analytic == pytest.approx(numeric, rel=self.rel, abs=self.abs_floor)

    def _check_gating(self, model, data, w, z):
        W_list = [w.per_observation(data.factor_index)]

        def shifted(block, j, k, step):
            alpha = np.array(model.alpha, copy=True)
            beta = np.array(model.beta, copy=True)
            (alpha if block == "alpha" else beta)[j, k] += step
            return alpha, beta

        for block, j in (("alpha", 0), ("alpha", 1), ("beta", 1)):
            gradient, hessian = gating_gradient_hessian(data, z, model.alpha, model.beta, W_list, j, block)
            for k in range(gradient.size):
                plus = shifted(block, j, k, self.h)
                minus = shifted(block, j, k, -self.h)
                numeric = (q1_objective(data, z, *plus, W_list) - q1_objective(data, z, *minus, W_list)) / (2 * self.h)
                self._close(gradient[k], numeric)
                grad_plus, _ = gating_gradient_hessian(data, z, *plus, W_list, j, block)
                grad_minus, _ = gating_gradient_hessian(data, z, *minus, W_list, j, block)
                np.testing.assert_allclose(
                    hessian[:, k], (grad_plus - grad_minus) / (2 * self.h), rtol=self.rel, atol=self.abs_floor
                )

    def _check_w(self, model, data, w, z):
        def objective(values):
            W = values.per_observation(data.factor_index)
            return float(np.sum(z * log_gating(data.X, W, model.alpha, model.beta)))

        for level in range(2):
            gradient, hessian = grad_wrt_w(data, model, w, z, level)
            for s in range(model.design.S[level]):
                plus = _shifted_w(w, level, s, self.h)
                minus = _shifted_w(w, level, s, -self.h)
                self._close(gradient[s], (objective(plus) - objective(minus)) / (2 * self.h))
                grad_plus, _ = grad_wrt_w(data, model, plus, z, level)
                grad_minus, _ = grad_wrt_w(data, model, minus, z, level)
                self._close(hessian[s], (grad_plus[s] - grad_minus[s]) / (2 * self.h))

    def _check_variational(self, model, data, z, post, seed):
        draws = sample_w(post, seed, 1000)
        h = 1e-6
        for level in range(2):
            _, grad_mu, grad_rho = level_objective_and_gradient(data, model, post, z, draws, level)
            for s in range(model.design.S[level]):
                values = []
                for sign in (1.0, -1.0):
                    mu = [np.array(m, copy=True) for m in post.mu]
                    mu[level][s] += sign * h
                    shifted = VariationalPosterior(mu=tuple(mu), sigma2=post.sigma2)
                    values.append(level_objective_and_gradient(data, model, shifted, z, draws, level)[0])
                self._close(grad_mu[s], (values[0] - values[1]) / (2 * h))

                values = []
                for sign in (1.0, -1.0):
                    rho = [np.log(s2) for s2 in post.sigma2]
                    rho[level][s] += sign * h
                    shifted = VariationalPosterior(mu=post.mu, sigma2=tuple(np.exp(r) for r in rho))
                    values.append(level_objective_and_gradient(data, model, shifted, z, draws, level)[0])
                self._close(grad_rho[s], (values[0] - values[1]) / (2 * h))

    @pytest.mark.parametrize("seed", range(50))
    def test_derivatives_match_central_differences(self, seed):
        rng = np.random.default_rng(1000 + seed)
        model, data, w, z, post = _random_instance(rng)
        self._check_gating(model, data, w, z)
        self._check_w(model, data, w, z)
        self._check_variational(model, data, z, post, seed)
