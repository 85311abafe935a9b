#!/usr/bin/env python
"""
事後分析

推定済みモデルと変分事後分布から、信用区間、事後的な潜在クラス確率と純保険料、
Ordered Lorenz 曲線と Gini 係数、テストデータでのモデル評価を計算します。
"""

import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, stats
from scipy.special import logsumexp

from .ecm_fitter import effective_param_count
from .errors import InvalidArgumentError, InvalidConfigurationError, UndefinedCurveError
from .mixed_lrmoe import Dataset, MixedLRMoEModel, RandomEffectsRealization, conditional_loglik, log_gating, log_joint_matrix
from .variational import VariationalPosterior, elbo_estimate_with_error, sample_w

logger = logging.getLogger(__name__)

DEFAULT_COVERAGES = (0.90, 0.95, 0.975, 0.99)


def _check_coverage(coverage: float) -> None:
    if not isinstance(coverage, (int, float, np.floating)) or not 0.0 < coverage < 1.0:
        raise InvalidConfigurationError(f"被覆確率は開区間 (0, 1) の値である必要があります: {coverage!r}")


def credible_interval(post: VariationalPosterior, level: int, factor: int, coverage: float) -> Tuple[float, float]:
    """変分事後分布のガウス分位点による中心信用区間 μ ± z_{(1+c)/2} σ を返します。

    Args:
        post: 変分事後分布
        level: レベル番号（0始まり）
        factor: 因子番号（0始まり）
        coverage: 被覆確率 c ∈ (0, 1)

    Returns:
        Tuple[float, float]: (下限, 上限)

    Raises:
        InvalidConfigurationError: 被覆確率が (0, 1) の外にある場合
        InvalidArgumentError: レベル・因子番号が範囲外の場合
    """
    _check_coverage(coverage)
    if not 0 <= level < post.L or not 0 <= factor < post.mu[level].size:
        raise InvalidArgumentError(f"レベル {level} / 因子 {factor} は事後分布の範囲外です")
    mu = float(post.mu[level][factor])
    half_width = float(stats.norm.ppf(0.5 * (1.0 + coverage))) * float(post.sigma(level)[factor])
    return mu - half_width, mu + half_width


def _factor_moments(post: VariationalPosterior, factor_ids: Sequence[Optional[int]]) -> Tuple[np.ndarray, np.ndarray]:
    if len(factor_ids) != post.L:
        raise InvalidArgumentError(f"因子番号の数 {len(factor_ids)} がレベル数 L = {post.L} と一致しません")
    mu = np.zeros(post.L)
    sigma = np.ones(post.L)
    for level, factor in enumerate(factor_ids):
        # 未知の因子は事前分布 N(0, 1) を用いる
        if factor is not None and 0 <= factor < post.mu[level].size:
            mu[level] = post.mu[level][factor]
            sigma[level] = post.sigma(level)[factor]
    return mu, sigma


def _class_prob_draws(x_new, post, model, factor_ids, M, seed) -> np.ndarray:
    x = np.asarray(x_new, dtype=float).reshape(1, -1)
    if x.shape[1] != model.P or not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"x は長さ {model.P} の有限値ベクトルである必要があります")
    if M < 1:
        raise InvalidArgumentError(f"サンプル数 M は1以上である必要があります: {M}")
    mu, sigma = _factor_moments(post, factor_ids)
    v = np.random.default_rng(seed).standard_normal((M, post.L))
    W = mu + sigma * v
    return np.exp(log_gating(np.repeat(x, M, axis=0), W, model.alpha, model.beta))


def posterior_class_probs(
    x_new: Sequence[float],
    post: VariationalPosterior,
    model: MixedLRMoEModel,
    factor_ids: Sequence[Optional[int]],
    M: int,
    seed,
) -> np.ndarray:
    """契約者の変分事後分布で平均した潜在クラス確率 (1/M) Σ_m π(x_new, w^[m]) を返します。

    因子番号が None または事後分布の範囲外の場合は新規契約者として事前分布からサンプリングします。
    """
    probs = _class_prob_draws(x_new, post, model, factor_ids, M, seed).mean(axis=0)
    return probs / probs.sum()


def class_means(model: MixedLRMoEModel) -> np.ndarray:
    """クラスごとの期待損失 E[Y | クラス j]（多次元応答では各次元の合計）"""
    return np.array([sum(expert.mean() for expert in row) for row in model.experts])


def posterior_premium(
    x_new: Sequence[float],
    post: VariationalPosterior,
    model: MixedLRMoEModel,
    factor_ids: Sequence[Optional[int]],
    M: int,
    seed,
) -> float:
    """事後的な純保険料 (1/M) Σ_m Σ_j π_j(x_new, w^[m]) E[Y | クラス j] を返します。"""
    probs = _class_prob_draws(x_new, post, model, factor_ids, M, seed)
    return float(np.mean(probs @ class_means(model)))


def _extended_posterior(post: VariationalPosterior, data: Dataset) -> VariationalPosterior:
    return post if post.design == data.design else post.extended(data.design)


def posterior_class_probs_batch(
    data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed
) -> np.ndarray:
    """データセットの各行について事後平均した潜在クラス確率（n×g）を返します。"""
    post = _extended_posterior(post, data)
    draws = sample_w(post, seed, M)
    probs = np.zeros((data.n, model.g))
    for m in range(M):
        W = draws.observation_matrix(m, data.factor_index)
        probs += np.exp(log_gating(data.X, W, model.alpha, model.beta))
    probs /= M
    return probs / probs.sum(axis=1, keepdims=True)


def posterior_premiums(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed) -> np.ndarray:
    """データセットの各行の事後的な純保険料（長さ n）"""
    return posterior_class_probs_batch(data, model, post, M, seed) @ class_means(model)


@dataclass
class PolicyholderPosterior:
    """契約者ごとの事後要約

    Attributes:
        factor_ids: レベルごとの因子番号（未知なら None）
        mean: レベルごとのランダム効果の事後平均
        variance: レベルごとのランダム効果の事後分散
        intervals: 被覆確率 → レベルごとの (下限, 上限)
        class_probs: 事後的な潜在クラス確率
        premium: 事後的な純保険料
    """

    factor_ids: List[Optional[int]]
    mean: List[float]
    variance: List[float]
    intervals: Dict[float, List[Tuple[float, float]]]
    class_probs: List[float]
    premium: float

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["intervals"] = {str(c): [list(pair) for pair in pairs] for c, pairs in self.intervals.items()}
        return data


def policyholder_posterior(
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    factor_ids: Sequence[Optional[int]],
    x_new: Sequence[float],
    coverages: Sequence[float] = DEFAULT_COVERAGES,
    M: int = 1000,
    seed=0,
) -> PolicyholderPosterior:
    """契約者の事後要約（事後平均・分散、入れ子の信用区間、クラス確率、純保険料）を作成します。"""
    mu, sigma = _factor_moments(post, factor_ids)
    intervals = {}
    for coverage in sorted(coverages):
        _check_coverage(coverage)
        z = float(stats.norm.ppf(0.5 * (1.0 + coverage)))
        intervals[float(coverage)] = [(float(m - z * s), float(m + z * s)) for m, s in zip(mu, sigma)]
    probs = posterior_class_probs(x_new, post, model, factor_ids, M, seed)
    return PolicyholderPosterior(
        factor_ids=list(factor_ids),
        mean=mu.tolist(),
        variance=(sigma**2).tolist(),
        intervals=intervals,
        class_probs=probs.tolist(),
        premium=float(probs @ class_means(model)),
    )


def credible_interval_coverage(
    post: VariationalPosterior, true_w: RandomEffectsRealization, coverage: float, level: int = 0
) -> Tuple[float, float]:
    """真のランダム効果を信用区間が含む因子の割合と、区間幅の平均を返します。"""
    _check_coverage(coverage)
    truth = true_w.w[level]
    if truth.size != post.mu[level].size:
        raise InvalidArgumentError("真のランダム効果と事後分布の因子数が一致しません")
    half_width = float(stats.norm.ppf(0.5 * (1.0 + coverage))) * post.sigma(level)
    covered = np.abs(truth - post.mu[level]) <= half_width
    return float(np.mean(covered)), float(np.mean(2.0 * half_width))


def _claim_groups(data: Dataset, level: int) -> np.ndarray:
    """因子ごとに少なくとも1件の正の応答があるかどうか"""
    index = data.factor_index[:, level]
    claims = np.bincount(index, weights=(data.Y > 0).any(axis=1).astype(float), minlength=data.design.S[level])
    return claims > 0


def _group_by_factor(values: np.ndarray, data: Dataset, level: int) -> Tuple[np.ndarray, np.ndarray]:
    index = data.factor_index[:, level]
    counts = data.factor_counts(level)
    if values.ndim == 1:
        sums = np.bincount(index, weights=values, minlength=counts.size)
    else:
        sums = np.column_stack([np.bincount(index, weights=col, minlength=counts.size) for col in values.T])
    observed = counts > 0
    means = sums[observed] / (counts[observed] if values.ndim == 1 else counts[observed][:, None])
    return means, observed


def class_probability_by_claim_history(
    data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed, level: int = 0
) -> Dict[str, Dict[str, Any]]:
    """契約者（因子）を請求の有無で分け、各グループの平均の事後クラス確率を返します。"""
    if not 0 <= level < data.L:
        raise InvalidArgumentError(f"レベル番号 {level} が範囲外です（L = {data.L}）")
    probs = posterior_class_probs_batch(data, model, post, M, seed)
    factor_probs, observed = _group_by_factor(probs, data, level)
    has_claim = _claim_groups(data, level)[observed]
    summary = {}
    for name, mask in (("with_claims", has_claim), ("claim_free", ~has_claim)):
        summary[name] = {
            "n_factors": int(mask.sum()),
            "class_probs": factor_probs[mask].mean(axis=0).tolist() if mask.any() else [float("nan")] * model.g,
        }
    return summary


def premium_by_claim_history(
    data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed, level: int = 0
) -> Dict[str, Any]:
    """契約者を請求の有無で分け、各グループの平均事後純保険料と相対的な割増率を返します。"""
    if not 0 <= level < data.L:
        raise InvalidArgumentError(f"レベル番号 {level} が範囲外です（L = {data.L}）")
    premiums = posterior_premiums(data, model, post, M, seed)
    factor_premiums, observed = _group_by_factor(premiums, data, level)
    has_claim = _claim_groups(data, level)[observed]
    with_claims = float(factor_premiums[has_claim].mean()) if has_claim.any() else float("nan")
    claim_free = float(factor_premiums[~has_claim].mean()) if (~has_claim).any() else float("nan")
    return {
        "with_claims": {"n_factors": int(has_claim.sum()), "mean_premium": with_claims},
        "claim_free": {"n_factors": int((~has_claim).sum()), "mean_premium": claim_free},
        "relative_loading": with_claims / claim_free - 1.0,
    }


@dataclass
class LorenzCurve:
    """Ordered Lorenz 曲線

    Attributes:
        x: 累積保険料割合（0 から 1）
        y: 累積損失割合（0 から 1）
        gini: Gini 係数
        gini_se: ブートストラップによる Gini 係数の標準誤差
    """

    x: np.ndarray
    y: np.ndarray
    gini: float
    gini_se: float = float("nan")


def _lorenz_points(premiums: np.ndarray, losses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(premiums, kind="stable")
    x = np.concatenate([[0.0], np.cumsum(premiums[order]) / premiums.sum()])
    y = np.concatenate([[0.0], np.cumsum(losses[order]) / losses.sum()])
    # 丸め誤差で終点が1からずれないようにする
    x[-1] = 1.0
    y[-1] = 1.0
    return x, y


def _gini(x: np.ndarray, y: np.ndarray) -> float:
    return float(1.0 - 2.0 * integrate.trapezoid(y, x))


def ordered_lorenz(
    premiums: Sequence[float], losses: Sequence[float], n_bootstrap: int = 500, seed=0
) -> LorenzCurve:
    """保険料の昇順に並べた Ordered Lorenz 曲線と Gini 係数を計算します。

    Gini 係数は曲線と対角線の間の面積の2倍（台形則）で、
    標準誤差は契約者のリサンプリングによるブートストラップで求めます。

    Args:
        premiums: 予測保険料（正）
        losses: 実損失（非負）
        n_bootstrap: ブートストラップ回数（0 なら標準誤差は NaN）
        seed: ブートストラップの乱数シード

    Returns:
        LorenzCurve: 曲線の点と Gini 係数

    Raises:
        InvalidArgumentError: 長さの不一致、非正の保険料、負の損失がある場合
        UndefinedCurveError: 損失の合計が0の場合
    """
    premiums = np.asarray(premiums, dtype=float).ravel()
    losses = np.asarray(losses, dtype=float).ravel()
    if premiums.size == 0 or premiums.shape != losses.shape:
        raise InvalidArgumentError(f"保険料と損失は同じ長さの空でない配列である必要があります: {premiums.shape}, {losses.shape}")
    if not (np.all(np.isfinite(premiums)) and np.all(np.isfinite(losses))):
        raise InvalidArgumentError("保険料または損失に非有限値が含まれています")
    if np.any(premiums <= 0):
        raise InvalidArgumentError("保険料は正である必要があります")
    if np.any(losses < 0):
        raise InvalidArgumentError("損失は非負である必要があります")
    if losses.sum() <= 0:
        raise UndefinedCurveError("損失の合計が0のため Lorenz 曲線を定義できません")

    x, y = _lorenz_points(premiums, losses)
    gini = _gini(x, y)

    replicates = []
    rng = np.random.default_rng(seed)
    n = premiums.size
    for _ in range(n_bootstrap):
        rows = rng.integers(0, n, size=n)
        if losses[rows].sum() <= 0:
            continue
        replicates.append(_gini(*_lorenz_points(premiums[rows], losses[rows])))
    gini_se = float(np.std(replicates, ddof=1)) if len(replicates) >= 2 else float("nan")
    return LorenzCurve(x=x, y=y, gini=gini, gini_se=gini_se)


def predictive_cdf(
    y_grid: Sequence[float], data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed, dim: int = 0
) -> np.ndarray:
    """観測の共変量と事後サンプルで平均した周辺予測分布関数 Σ_j π̄_j F_jd(y) を返します。"""
    weights = posterior_class_probs_batch(data, model, post, M, seed).mean(axis=0)
    y_grid = np.asarray(y_grid, dtype=float)
    return sum(weights[j] * model.experts[j][dim].cdf(y_grid) for j in range(model.g))


def ks_statistic(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed, dim: int = 0) -> float:
    """周辺予測分布と応答の経験分布の Kolmogorov–Smirnov 統計量"""
    y = np.sort(data.Y[:, dim])
    cdf = predictive_cdf(y, data, model, post, M, seed, dim)
    n = y.size
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(max(np.max(np.abs(upper - cdf)), np.max(np.abs(cdf - lower))))


def _log_normal_density(w: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return stats.norm.logpdf(w, loc=mu, scale=sigma)


def approximate_loglik(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed) -> float:
    """変分事後分布を提案分布とする重点サンプリングで周辺対数尤度を近似します。

    L = 0 では厳密な対数尤度、L = 1 では因子ごとに独立に、L ≥ 2 では全体で同時に推定します。
    """
    if model.L == 0:
        return conditional_loglik(data, model, RandomEffectsRealization())
    post = _extended_posterior(post, data)
    draws = sample_w(post, seed, M)
    log_weights = []
    for level in range(model.L):
        mu, sigma = post.mu[level], post.sigma(level)
        log_weights.append(
            _log_normal_density(draws.w[level], 0.0, 1.0) - _log_normal_density(draws.w[level], mu, sigma)
        )

    if model.L == 1:
        index = data.factor_index[:, 0]
        size = data.design.S[0]
        per_factor = np.empty((M, size))
        for m in range(M):
            W = draws.observation_matrix(m, data.factor_index)
            row_loglik = logsumexp(log_joint_matrix(data, model, W), axis=1)
            per_factor[m] = np.bincount(index, weights=row_loglik, minlength=size)
        observed = data.factor_counts(0) > 0
        terms = per_factor[:, observed] + log_weights[0][:, observed]
        return float(np.sum(logsumexp(terms, axis=0) - np.log(M)))

    totals = np.empty(M)
    for m in range(M):
        W = draws.observation_matrix(m, data.factor_index)
        totals[m] = np.sum(logsumexp(log_joint_matrix(data, model, W), axis=1))
        totals[m] += sum(float(np.sum(lw[m])) for lw in log_weights)
    return float(logsumexp(totals) - np.log(M))


def _unobserved_kl(post: VariationalPosterior, data: Dataset) -> float:
    """観測のない因子のKL項の合計（テストデータのELBOから除外する分）"""
    total = 0.0
    for level in range(post.L):
        missing = data.factor_counts(level) == 0
        mu, sigma2 = post.mu[level][missing], post.sigma2[level][missing]
        total += 0.5 * float(np.sum(sigma2 + mu**2 - 1.0 - np.log(sigma2)))
    return total


@dataclass
class EvaluationScores:
    """テストデータでの評価指標

    Attributes:
        elbo: ELBO の推定値
        elbo_se: ELBO のモンテカルロ標準誤差
        approx_loglik: 近似周辺対数尤度
        aic: 2k − 2 × 近似対数尤度
        n_params: 実効パラメータ数 k
        n_unseen: 学習時に現れなかった因子の数（事前分布で代用）
    """

    elbo: float
    elbo_se: float
    approx_loglik: float
    aic: float
    n_params: int
    n_unseen: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def evaluate(
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    data_test: Dataset,
    M: int,
    seed,
    elbo_samples: Optional[int] = None,
) -> EvaluationScores:
    """テストデータで ELBO、近似対数尤度、AIC を計算します。

    学習時に現れなかった因子には事前分布を用います。ELBO は推定時と同じ方法で
    シードから監視用の標準正規乱数を作るため、学習データに推定時のシードと
    サンプル数を与えると推定の最終ELBOを再現します。

    Args:
        model: 推定済みモデル
        post: 推定済みの変分事後分布
        data_test: テストデータ（因子の設計は学習時以上の大きさ）
        M: サンプル数
        seed: 乱数シード
        elbo_samples: ELBO のサンプル数（省略時は M）

    Returns:
        EvaluationScores: 評価指標
    """
    if data_test.n < 1:
        raise InvalidArgumentError("テストデータが空です")
    if data_test.P != model.P or data_test.D != model.D or data_test.L != model.L:
        raise InvalidArgumentError("テストデータの形状がモデルと一致しません")
    extended = _extended_posterior(post, data_test)
    n_unseen = 0
    for level in range(data_test.L):
        known = post.mu[level].size
        n_unseen += int(np.sum(data_test.factor_counts(level)[known:] > 0))
    if n_unseen:
        logger.info(f"未知の因子 {n_unseen} 個に事前分布を使用しました")

    test_model = model.with_design(data_test.design)
    elbo, elbo_se = elbo_estimate_with_error(data_test, test_model, extended, elbo_samples or M, seed)
    elbo += _unobserved_kl(extended, data_test)
    approx = approximate_loglik(data_test, test_model, extended, M, seed)
    k = effective_param_count(model)
    return EvaluationScores(
        elbo=float(elbo),
        elbo_se=float(elbo_se),
        approx_loglik=float(approx),
        aic=2.0 * k - 2.0 * approx,
        n_params=k,
        n_unseen=n_unseen,
    )
