#!/usr/bin/env python
"""
Mixed LRMoE モデル本体のテストコード
"""

import itertools

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp, softmax

from src.errors import InvalidArgumentError
from src.experts import GammaExpert, LogNormalExpert
from src.mixed_lrmoe import (
    Dataset,
    MixedLRMoEModel,
    RandomEffectDesign,
    RandomEffectsRealization,
    conditional_loglik,
    gating_probs,
    latent_class_responsibilities_given_w,
    log_gating,
    responsibilities_from_log_joint,
)


def _two_class_model(S=(3,)):
    design = RandomEffectDesign(S=S)
    alpha = np.array([[0.5, -1.0], [0.0, 0.0]])
    beta = np.vstack([np.ones(design.L), np.zeros(design.L)])
    experts = ((GammaExpert(shape=2.0, scale=1.0),), (GammaExpert(shape=5.0, scale=10.0),))
    return MixedLRMoEModel(alpha=alpha, beta=beta, experts=experts, design=design)


def _three_class_model():
    design = RandomEffectDesign(S=(2, 3))
    alpha = np.array([[0.5, -1.0], [-0.3, 0.8], [0.0, 0.0]])
    beta = np.array([[1.0, 1.0], [-0.8, 0.6], [0.0, 0.0]])
    experts = (
        (GammaExpert(shape=2.0, scale=1.0),),
        (GammaExpert(shape=5.0, scale=4.0),),
        (LogNormalExpert(meanlog=3.0, sdlog=0.5),),
    )
    return MixedLRMoEModel(alpha=alpha, beta=beta, experts=experts, design=design)


def _tiny_dataset(model, n=12, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n)])
    Y = rng.gamma(2.0, 5.0, size=(n, 1))
    factor_index = np.column_stack([np.arange(n) % size for size in model.design.S]) if model.L else None
    return Dataset(X=X, Y=Y, factor_index=factor_index, design=model.design)


class TestGating:
    """ゲーティング確率のテストクラス"""

    def test_matches_softmax(self):
        model = _three_class_model()
        x = np.array([1.0, 1.0])
        w = np.array([0.4, -1.1])
        expected = softmax(model.alpha @ x + model.beta @ w)
        np.testing.assert_allclose(gating_probs(x, w, model), expected, rtol=1e-12)

    def test_sums_to_one_and_in_unit_interval(self):
        model = _three_class_model()
        rng = np.random.default_rng(1)
        for _ in range(50):
            probs = gating_probs([1.0, rng.normal()], rng.normal(size=2), model)
            assert probs.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all((probs >= 0) & (probs <= 1))

    def test_extreme_linear_predictors(self):
        """線形予測子が ±1e3 でも有限で和が1"""
        model = _two_class_model(S=(1,))
        for w in (1e3, -1e3):
            probs = gating_probs([1.0, 0.0], [w], model)
            assert np.all(np.isfinite(probs))
            assert probs.sum() == pytest.approx(1.0)
        assert gating_probs([1.0, 0.0], [1e3], model)[0] == pytest.approx(1.0)

    def test_single_class(self):
        design = RandomEffectDesign(S=(2,))
        model = MixedLRMoEModel(
            alpha=np.zeros((1, 2)), beta=np.zeros((1, 1)), experts=((GammaExpert(1.0, 1.0),),), design=design
        )
        assert gating_probs([1.0, 3.0], [0.7], model).tolist() == [1.0]

    def test_rejects_non_finite_and_wrong_length(self):
        model = _two_class_model()
        with pytest.raises(InvalidArgumentError):
            gating_probs([1.0, np.inf], [0.0], model)
        with pytest.raises(InvalidArgumentError):
            gating_probs([1.0], [0.0], model)

    def test_worked_example_two_classes(self):
        """切片 ln 2 の2クラスでは (2/3, 1/3)"""
        model = MixedLRMoEModel(
            alpha=np.array([[np.log(2.0)], [0.0]]),
            beta=np.array([[1.0], [0.0]]),
            experts=((GammaExpert(2.0, 1.0),), (GammaExpert(5.0, 10.0),)),
            design=RandomEffectDesign(S=(1,)),
        )
        np.testing.assert_allclose(gating_probs([1.0], [0.0], model), [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12)

    def test_shift_invariance(self):
        """全クラスの α（と β）に同じベクトルを加えても確率は変わらない"""
        model = _three_class_model()
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(10), rng.normal(size=10)])
        W = rng.normal(size=(10, 2))
        expected = log_gating(X, W, model.alpha, model.beta)
        for _ in range(5):
            alpha_shift = rng.normal(scale=5.0, size=2)
            beta_shift = rng.normal(scale=5.0, size=2)
            shifted = log_gating(X, W, model.alpha + alpha_shift, model.beta + beta_shift)
            np.testing.assert_allclose(np.exp(shifted), np.exp(expected), atol=1e-12)


class TestModelValidation:
    """モデルの識別性制約と形状検証のテストクラス"""

    def test_last_class_must_be_zero(self):
        with pytest.raises(InvalidArgumentError):
            MixedLRMoEModel(
                alpha=np.array([[0.5, 0.0], [0.1, 0.0]]),
                beta=np.array([[1.0], [0.0]]),
                experts=((GammaExpert(1.0, 1.0),), (GammaExpert(2.0, 1.0),)),
                design=RandomEffectDesign(S=(2,)),
            )

    def test_first_loading_must_be_one(self):
        with pytest.raises(InvalidArgumentError):
            MixedLRMoEModel(
                alpha=np.zeros((2, 2)),
                beta=np.array([[0.5], [0.0]]),
                experts=((GammaExpert(1.0, 1.0),), (GammaExpert(2.0, 1.0),)),
                design=RandomEffectDesign(S=(2,)),
            )

    def test_pin_identifiability(self):
        alpha, beta = MixedLRMoEModel.pin_identifiability(np.ones((3, 2)), np.full((3, 2), 0.3))
        assert np.all(alpha[-1] == 0.0)
        assert np.all(beta[-1] == 0.0)
        assert np.all(beta[0] == 1.0)
        assert np.all(beta[1] == 0.3)

    def test_round_trip_preserves_predictions(self):
        """to_dict / from_dict の往復でゲーティング確率が完全に一致すること"""
        model = _three_class_model()
        restored = MixedLRMoEModel.from_dict(model.to_dict())
        x, w = [1.0, 1.0], [0.3, -0.2]
        assert np.array_equal(gating_probs(x, w, model), gating_probs(x, w, restored))
        assert restored.design == model.design

    def test_with_design(self):
        model = _two_class_model(S=(3,))
        extended = model.with_design(RandomEffectDesign(S=(5,)))
        assert extended.design.S == (5,)
        assert np.array_equal(extended.alpha, model.alpha)
        with pytest.raises(InvalidArgumentError):
            model.with_design(RandomEffectDesign(S=(3, 2)))

    def test_arrays_are_read_only(self):
        model = _two_class_model()
        with pytest.raises(ValueError):
            model.alpha[0, 0] = 9.0


class TestDataset:
    """データセットの検証のテストクラス"""

    def test_intercept_required(self):
        with pytest.raises(InvalidArgumentError):
            Dataset(X=np.array([[2.0], [1.0]]), Y=np.ones((2, 1)), factor_index=None, design=RandomEffectDesign())

    def test_factor_index_range(self):
        with pytest.raises(InvalidArgumentError):
            Dataset(X=np.ones((2, 1)), Y=np.ones((2, 1)), factor_index=np.array([0, 2]), design=RandomEffectDesign(S=(2,)))

    def test_non_finite_response(self):
        with pytest.raises(InvalidArgumentError):
            Dataset(X=np.ones((2, 1)), Y=np.array([1.0, np.nan]), factor_index=None, design=RandomEffectDesign())

    def test_factor_counts_and_subset(self):
        design = RandomEffectDesign(S=(3,))
        data = Dataset(X=np.ones((5, 1)), Y=np.ones(5), factor_index=np.array([0, 0, 2, 2, 2]), design=design)
        assert data.factor_counts(0).tolist() == [2, 0, 3]
        subset = data.subset(np.array([0, 2]))
        assert subset.n == 2
        assert subset.factor_index[:, 0].tolist() == [0, 2]


class TestConditionalLoglik:
    """条件付き対数尤度のテストクラス"""

    def test_single_class_without_random_effects(self):
        """g = 1, L = 0 では Σ_i log f(y_i) と一致"""
        expert = GammaExpert(shape=2.0, scale=3.0)
        model = MixedLRMoEModel(
            alpha=np.zeros((1, 1)), beta=np.zeros((1, 0)), experts=((expert,),), design=RandomEffectDesign()
        )
        y = np.array([0.5, 2.0, 9.0])
        data = Dataset(X=np.ones((3, 1)), Y=y, factor_index=None, design=RandomEffectDesign())
        value = conditional_loglik(data, model, RandomEffectsRealization())
        assert value == pytest.approx(np.sum(stats.gamma.logpdf(y, a=2.0, scale=3.0)), rel=1e-12)

    def test_matches_explicit_mixture(self):
        model = _three_class_model()
        data = _tiny_dataset(model)
        w = RandomEffectsRealization(w=(np.array([0.2, -0.5]), np.array([1.0, 0.0, -0.7])))
        expected = 0.0
        for i in range(data.n):
            w_i = [w.w[level][data.factor_index[i, level]] for level in range(2)]
            probs = gating_probs(data.X[i], w_i, model)
            density = sum(
                probs[j] * np.exp(model.experts[j][0].logpdf(data.Y[i, :1])[0]) for j in range(model.g)
            )
            expected += np.log(density)
        assert conditional_loglik(data, model, w) == pytest.approx(expected, rel=1e-10)

    def test_zero_density_returns_minus_inf(self):
        model = _two_class_model()
        data = Dataset(
            X=np.ones((2, 2)), Y=np.array([1.0, 0.0]), factor_index=np.array([0, 1]), design=model.design
        )
        diagnostics = []
        value = conditional_loglik(data, model, RandomEffectsRealization.zeros(model.design), diagnostics)
        assert value == -np.inf
        assert diagnostics

    def test_brute_force_marginal_over_classes(self):
        """潜在クラスの全割り当てを列挙した尤度の和と一致すること（n = 4, g = 2）"""
        model = _two_class_model(S=(2,))
        data = _tiny_dataset(model, n=4, seed=3)
        w = RandomEffectsRealization(w=(np.array([0.3, -0.9]),))
        W = w.per_observation(data.factor_index)
        log_terms = []
        for labels in itertools.product(range(2), repeat=data.n):
            total = 0.0
            for i, j in enumerate(labels):
                probs = gating_probs(data.X[i], W[i], model)
                total += np.log(probs[j]) + model.experts[j][0].logpdf(data.Y[i, :1])[0]
            log_terms.append(total)
        assert conditional_loglik(data, model, w) == pytest.approx(logsumexp(log_terms), rel=1e-10)


class TestResponsibilities:
    """責任度のテストクラス"""

    def test_rows_sum_to_one(self):
        model = _three_class_model()
        data = _tiny_dataset(model)
        z = latent_class_responsibilities_given_w(data, model, RandomEffectsRealization.zeros(model.design))
        np.testing.assert_allclose(z.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(z >= 0)

    def test_degenerate_rows_become_uniform(self):
        diagnostics = []
        log_joint = np.array([[-np.inf, -np.inf], [0.0, np.log(3.0)]])
        z = responsibilities_from_log_joint(log_joint, diagnostics)
        assert z[0].tolist() == [0.5, 0.5]
        np.testing.assert_allclose(z[1], [0.25, 0.75])
        assert len(diagnostics) == 1

    def test_permutation_equivariance(self):
        """クラスをパラメータごと並べ替えると責任度の列も同じように並べ替わる"""
        base = _three_class_model()
        design = RandomEffectDesign()
        model = MixedLRMoEModel(alpha=base.alpha, beta=np.zeros((3, 0)), experts=base.experts, design=design)
        data = _tiny_dataset(model, n=15, seed=3)
        z = latent_class_responsibilities_given_w(data, model, RandomEffectsRealization())
        for order in itertools.permutations(range(3)):
            order = list(order)
            alpha = model.alpha[order] - model.alpha[order][-1]
            permuted = MixedLRMoEModel(
                alpha=alpha, beta=np.zeros((3, 0)), experts=tuple(model.experts[j] for j in order), design=design
            )
            z_perm = latent_class_responsibilities_given_w(data, permuted, RandomEffectsRealization())
            np.testing.assert_allclose(z_perm, z[:, order], atol=1e-12)

    def test_identical_experts_give_gating_probabilities(self):
        base = _three_class_model()
        expert = (GammaExpert(shape=3.0, scale=2.0),)
        model = base.with_parameters(experts=(expert, expert, expert))
        data = _tiny_dataset(model, n=12, seed=4)
        w = RandomEffectsRealization(w=(np.array([0.3, -0.7]), np.array([1.2, 0.0, -0.4])))
        z = latent_class_responsibilities_given_w(data, model, w)
        W = w.per_observation(data.factor_index)
        np.testing.assert_allclose(z, np.exp(log_gating(data.X, W, model.alpha, model.beta)), atol=1e-12)
