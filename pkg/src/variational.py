#!/usr/bin/env python
"""
変分事後分布

ランダム効果の事後分布を平均場ガウス族 q(w; Θ) で近似します。
サンプリング（再パラメータ化 w = μ + σ v）、標準正規事前分布へのKLダイバージェンス、
ELBOのモンテカルロ推定、w に関する勾配・ヘッセ対角、
および変分パラメータのNewton法による更新を提供します。
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError
from .mixed_lrmoe import (
    Dataset,
    MixedLRMoEModel,
    RandomEffectDesign,
    RandomEffectsRealization,
    conditional_loglik,
    expert_log_density_matrix,
    log_gating,
)

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12
_LOG_SIGMA2_FLOOR = float(np.log(SIGMA2_FLOOR))
_MAX_LOG_SIGMA2_STEP = 10.0


@dataclass(frozen=True)
class VariationalPosterior:
    """平均場変分事後分布 Θ = {(μ_l, diag Σ_l)}

    Attributes:
        mu: レベルごとの事後平均ベクトル（長さ S_l）
        sigma2: レベルごとの事後分散ベクトル（1e-12 で下限を取る）
    """

    mu: Tuple[np.ndarray, ...] = ()
    sigma2: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        mu = tuple(np.array(level, dtype=float).ravel() for level in self.mu)
        sigma2 = tuple(np.array(level, dtype=float).ravel() for level in self.sigma2)
        if len(mu) != len(sigma2) or any(m.shape != s.shape for m, s in zip(mu, sigma2)):
            raise InvalidArgumentError("mu と sigma2 の形状が一致しません")
        for m, s in zip(mu, sigma2):
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
                raise InvalidArgumentError("変分パラメータに非有限値が含まれています")
            if np.any(s < 0):
                raise InvalidArgumentError("sigma2 は正である必要があります")
        sigma2 = tuple(np.maximum(s, SIGMA2_FLOOR) for s in sigma2)
        for array in mu + sigma2:
            array.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def L(self) -> int:
        return len(self.mu)

    @property
    def design(self) -> RandomEffectDesign:
        return RandomEffectDesign(S=tuple(m.size for m in self.mu))

    def sigma(self, level: int) -> np.ndarray:
        return np.sqrt(self.sigma2[level])

    @classmethod
    def prior(cls, design: RandomEffectDesign) -> "VariationalPosterior":
        """事前分布と一致する（μ = 0, Σ = I）事後分布を返します。"""
        return cls(mu=tuple(np.zeros(s) for s in design.S), sigma2=tuple(np.ones(s) for s in design.S))

    def extended(self, design: RandomEffectDesign) -> "VariationalPosterior":
        """因子数が増えた設計に合わせ、未知の因子を事前分布で埋めた事後分布を返します。"""
        if design.L != self.L:
            raise InvalidArgumentError(f"レベル数が一致しません: {design.L} != {self.L}")
        mu, sigma2 = [], []
        for level, size in enumerate(design.S):
            known = self.mu[level].size
            if size < known:
                raise InvalidArgumentError(f"レベル {level + 1} の因子数が学習時より少なくなっています")
            mu.append(np.concatenate([self.mu[level], np.zeros(size - known)]))
            sigma2.append(np.concatenate([self.sigma2[level], np.ones(size - known)]))
        return VariationalPosterior(mu=tuple(mu), sigma2=tuple(sigma2))

    def to_dict(self) -> Dict[str, Any]:
        return {"mu": [m.tolist() for m in self.mu], "sigma2": [s.tolist() for s in self.sigma2]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VariationalPosterior":
        return cls(mu=tuple(np.asarray(m) for m in data["mu"]), sigma2=tuple(np.asarray(s) for s in data["sigma2"]))


@dataclass(frozen=True)
class RandomEffectDraws:
    """変分事後分布からの M 個のサンプル

    再パラメータ化勾配の計算と共通乱数による比較のため、
    標準正規乱数 v をサンプル w = μ + σ v と一緒に保持します。

    Attributes:
        M: サンプル数
        v: レベルごとの M×S_l 標準正規乱数
        w: レベルごとの M×S_l サンプル
    """

    M: int
    v: Tuple[np.ndarray, ...]
    w: Tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return self.M

    def __getitem__(self, m: int) -> RandomEffectsRealization:
        if not -self.M <= m < self.M:
            raise IndexError(m)
        return RandomEffectsRealization(w=tuple(level[m] for level in self.w))

    @classmethod
    def from_standard_normals(cls, post: VariationalPosterior, v: Tuple[np.ndarray, ...], M: int) -> "RandomEffectDraws":
        w = tuple(post.mu[level] + post.sigma(level) * v[level] for level in range(post.L))
        return cls(M=M, v=tuple(v), w=w)

    def rebased(self, post: VariationalPosterior) -> "RandomEffectDraws":
        """同じ標準正規乱数 v を使い、別の事後分布でサンプルを作り直します（共通乱数）。"""
        return RandomEffectDraws.from_standard_normals(post, self.v, self.M)

    def observation_matrix(self, m: int, factor_index: np.ndarray) -> np.ndarray:
        """m 番目のサンプルの観測ごとのランダム効果（n×L）"""
        n = factor_index.shape[0]
        if not self.w:
            return np.zeros((n, 0))
        return np.column_stack([level[m][factor_index[:, k]] for k, level in enumerate(self.w)])


def standard_normal_draws(design: RandomEffectDesign, M: int, seed) -> Tuple[np.ndarray, ...]:
    """レベルごとに M×S_l の標準正規乱数を生成します。"""
    if M < 1:
        raise InvalidArgumentError(f"サンプル数 M は1以上である必要があります: {M}")
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal((M, size)) for size in design.S)


def monitor_normals(design: RandomEffectDesign, M: int, seed) -> Tuple[np.ndarray, ...]:
    """シードから推定・評価で共通に使う ELBO 監視用の標準正規乱数を生成します。

    SeedSequence(seed) の最初の子系列から作るため、同じシード・同じ M・同じ設計なら
    推定時の ELBO の推移と評価時の ELBO は同じ乱数で計算されます。
    """
    return standard_normal_draws(design, M, np.random.SeedSequence(seed).spawn(1)[0])


def draw_responsibilities(responsibilities: np.ndarray, m: int) -> np.ndarray:
    """サンプル m に対応する n×g の責任度（n×g を与えた場合は全サンプル共通）"""
    return responsibilities[m] if responsibilities.ndim == 3 else responsibilities


def sample_w(post: VariationalPosterior, rng_seed, M: int) -> RandomEffectDraws:
    """変分事後分布からランダム効果をサンプリングします。

    Args:
        post: 変分事後分布
        rng_seed: 乱数シード（同じシードなら同じサンプル）
        M: サンプル数

    Returns:
        RandomEffectDraws: サンプルと標準正規乱数
    """
    v = standard_normal_draws(post.design, M, rng_seed)
    return RandomEffectDraws.from_standard_normals(post, v, M)


def kl_to_prior(post: VariationalPosterior) -> float:
    """KL[q(w; Θ) || N(0, I)] を閉形式で計算します。

    ½ Σ_l Σ_s [σ² + μ² − 1 − log σ²]（事前分布と一致するとき0）。
    """
    total = 0.0
    for mu, sigma2 in zip(post.mu, post.sigma2):
        total += 0.5 * float(np.sum(sigma2 + mu**2 - 1.0 - np.log(sigma2)))
    return max(total, 0.0)


def draw_logliks(data: Dataset, model: MixedLRMoEModel, draws: RandomEffectDraws) -> np.ndarray:
    """各サンプル w^[m] における条件付き対数尤度（長さ M）"""
    log_f = expert_log_density_matrix(data.Y, model)
    values = np.empty(draws.M)
    for m in range(draws.M):
        W = draws.observation_matrix(m, data.factor_index)
        with np.errstate(invalid="ignore"):
            joint = log_gating(data.X, W, model.alpha, model.beta) + log_f
        values[m] = np.sum(logsumexp(joint, axis=1))
    return values


def elbo_from_draws(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, draws: RandomEffectDraws) -> float:
    """与えられたサンプルを使ったELBOのモンテカルロ推定"""
    if model.L == 0:
        return conditional_loglik(data, model, RandomEffectsRealization())
    return float(np.mean(draw_logliks(data, model, draws))) - kl_to_prior(post)


def elbo_estimate_with_error(
    data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed
) -> Tuple[float, float]:
    """ELBOの推定値とモンテカルロ標準誤差を返します（L = 0 なら誤差0）。

    サンプルは monitor_normals で作るため、推定時と同じシード・M なら
    推定の最終ELBOと同じ値になります。
    """
    if model.L == 0:
        return conditional_loglik(data, model, RandomEffectsRealization()), 0.0
    draws = RandomEffectDraws.from_standard_normals(post, monitor_normals(post.design, M, seed), M)
    values = draw_logliks(data, model, draws)
    std_error = float(np.std(values, ddof=1) / np.sqrt(M)) if M > 1 else float("inf")
    return float(np.mean(values)) - kl_to_prior(post), std_error


def elbo_estimate(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed) -> float:
    """ELBO = (1/M) Σ_m log L̃(w^[m]) − KL[q || φ] の不偏推定値を返します。

    Args:
        data: データセット
        model: モデル
        post: 変分事後分布
        M: サンプル数
        seed: 乱数シード

    Returns:
        float: ELBOの推定値（L = 0 のときは厳密な対数尤度）
    """
    return elbo_estimate_with_error(data, model, post, M, seed)[0]


def _check_responsibilities(
    data: Dataset, model: MixedLRMoEModel, responsibilities: np.ndarray, M: Optional[int] = None
) -> np.ndarray:
    z = np.asarray(responsibilities, dtype=float)
    if z.ndim == 3 and M is not None and z.shape == (M, data.n, model.g):
        return z
    if z.shape != (data.n, model.g):
        raise InvalidArgumentError(f"責任度の形状 {z.shape} が (n, g) = ({data.n}, {model.g}) と一致しません")
    return z


def _observation_w_terms(X, W, z, model: MixedLRMoEModel, level: int):
    """観測ごとの Σ_j z_ij log π_ij と、w_il に関する1階・2階微分を返します。"""
    log_pi = log_gating(X, W, model.alpha, model.beta)
    pi = np.exp(log_pi)
    b = model.beta[:, level]
    b_bar = pi @ b
    b2_bar = pi @ (b * b)
    z_sum = z.sum(axis=1)
    objective = np.sum(z * log_pi, axis=1)
    gradient = z @ b - b_bar * z_sum
    hessian = z_sum * (b_bar**2 - b2_bar)
    return objective, gradient, hessian


def grad_wrt_w(
    data: Dataset,
    model: MixedLRMoEModel,
    w: RandomEffectsRealization,
    responsibilities: np.ndarray,
    level: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """完全データ対数尤度 ℓ̃^c のレベル l のランダム効果に関する勾配とヘッセ対角を返します。

    勾配 s 成分 = Σ_{i: c_l(i)=s} Σ_j z_ij (β_jl − β̄_l(i))、
    ヘッセ対角 s 成分 = Σ_{i: c_l(i)=s} Σ_j z_ij [(β̄_l(i))² − (β²_l)‾(i)]。
    各観測はレベルごとにちょうど1つの因子に属するため、ヘッセ行列は対角になります。

    Raises:
        InvalidArgumentError: 形状やレベル番号が不正な場合
    """
    z = _check_responsibilities(data, model, responsibilities)
    if not 0 <= level < model.L:
        raise InvalidArgumentError(f"レベル番号 {level} が範囲外です（L = {model.L}）")
    if w.L != model.L:
        raise InvalidArgumentError(f"ランダム効果のレベル数 {w.L} がモデルの L = {model.L} と一致しません")
    size = w.w[level].size
    W = w.per_observation(data.factor_index)
    _, gradient, hessian = _observation_w_terms(data.X, W, z, model, level)
    index = data.factor_index[:, level]
    return np.bincount(index, weights=gradient, minlength=size), np.bincount(index, weights=hessian, minlength=size)


@dataclass(frozen=True)
class NewtonControls:
    """変分パラメータ更新のNewton法の制御値

    Attributes:
        max_iters: レベルごとの最大反復回数
        max_halvings: ステップ半減の最大回数
        tol: 目的関数の相対改善量の収束判定値
    """

    max_iters: int = 20
    max_halvings: int = 20
    tol: float = 1e-8


class _LevelObjective:
    """1つのレベルの変分パラメータ (μ_l, log σ²_l) に関する目的関数

    他のレベルの変分パラメータと標準正規乱数 v を固定した、因子ごとに分離可能な
    F_s = (1/M) Σ_m Σ_{i: c_l(i)=s} Σ_j z_ij log π_ij(w^[m]) − KL_s を評価します。
    z が M×n×g ならサンプル m ごとの責任度 z^[m] を使います。
    """

    def __init__(self, data: Dataset, model: MixedLRMoEModel, z: np.ndarray, v, mu, log_sigma2, level: int):
        self.data = data
        self.model = model
        self.z = z
        self.v = v
        self.level = level
        self.size = model.design.S[level] if level < model.L else 0
        self.M = v[level].shape[0]
        self.index = data.factor_index[:, level]
        # 他のレベルの観測ごとのランダム効果（サンプルごと）
        self.fixed_columns = []
        for m in range(self.M):
            columns = []
            for k in range(model.L):
                if k == level:
                    columns.append(None)
                else:
                    w_k = mu[k] + np.exp(0.5 * log_sigma2[k]) * v[k][m]
                    columns.append(w_k[data.factor_index[:, k]])
            self.fixed_columns.append(columns)

    def evaluate(self, mu_l: np.ndarray, log_sigma2_l: np.ndarray, derivatives: bool = True):
        """因子ごとの目的関数値と、必要なら (μ, log σ²) に関する勾配・2×2ヘッセ行列を返します。"""
        sigma = np.exp(0.5 * log_sigma2_l)
        sigma2 = sigma**2
        S, M = self.size, self.M
        objective = np.zeros(S)
        G = np.zeros((M, S))
        H = np.zeros((M, S))
        for m in range(M):
            w_l = mu_l + sigma * self.v[self.level][m]
            columns = [w_l[self.index] if col is None else col for col in self.fixed_columns[m]]
            W = np.column_stack(columns)
            z_m = draw_responsibilities(self.z, m)
            q_i, g_i, h_i = _observation_w_terms(self.data.X, W, z_m, self.model, self.level)
            objective += np.bincount(self.index, weights=q_i, minlength=S)
            if derivatives:
                G[m] = np.bincount(self.index, weights=g_i, minlength=S)
                H[m] = np.bincount(self.index, weights=h_i, minlength=S)
        objective = objective / M - 0.5 * (sigma2 + mu_l**2 - 1.0 - log_sigma2_l)
        if not derivatives:
            return objective, None

        dw_drho = 0.5 * sigma * self.v[self.level]
        grad_mu = G.mean(axis=0) - mu_l
        grad_rho = np.mean(G * dw_drho, axis=0) - 0.5 * (sigma2 - 1.0)
        h_mm = H.mean(axis=0) - 1.0
        h_mr = np.mean(H * dw_drho, axis=0)
        h_rr = np.mean(H * dw_drho**2 + 0.5 * G * dw_drho, axis=0) - 0.5 * sigma2
        return objective, (grad_mu, grad_rho, h_mm, h_mr, h_rr)


def _newton_direction(grad_mu, grad_rho, h_mm, h_mr, h_rr):
    # 2×2 ブロックが負定値でない因子は固有値をずらして上昇方向を保証する
    lam_max = 0.5 * (h_mm + h_rr) + np.sqrt(0.25 * (h_mm - h_rr) ** 2 + h_mr**2)
    shift = np.where(lam_max > -1e-2, lam_max + 1e-2, 0.0)
    a = h_mm - shift
    d = h_rr - shift
    det = a * d - h_mr**2
    step_mu = -(d * grad_mu - h_mr * grad_rho) / det
    step_rho = -(-h_mr * grad_mu + a * grad_rho) / det
    return step_mu, np.clip(step_rho, -_MAX_LOG_SIGMA2_STEP, _MAX_LOG_SIGMA2_STEP)


def level_objective_and_gradient(
    data: Dataset,
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    responsibilities: np.ndarray,
    draws: RandomEffectDraws,
    level: int,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """レベル l の変分目的関数（定数項を除く）と μ_l, log σ²_l に関する再パラメータ化勾配を返します。"""
    z = _check_responsibilities(data, model, responsibilities, draws.M)
    log_sigma2 = [np.log(s) for s in post.sigma2]
    objective = _LevelObjective(data, model, z, draws.v, post.mu, log_sigma2, level)
    values, terms = objective.evaluate(post.mu[level], log_sigma2[level])
    return float(values.sum()), terms[0], terms[1]


def complete_data_elbo(
    data: Dataset,
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    responsibilities: np.ndarray,
    draws: RandomEffectDraws,
) -> float:
    """完全データELBO (1/M) Σ_m Σ_i Σ_j z_ij log[π_ij f_ij] − KL を共通乱数で評価します。"""
    z = _check_responsibilities(data, model, responsibilities, draws.M)
    log_f = expert_log_density_matrix(data.Y, model)
    rebased = draws.rebased(post)
    total = 0.0
    for m in range(rebased.M):
        W = rebased.observation_matrix(m, data.factor_index)
        joint = log_gating(data.X, W, model.alpha, model.beta) + log_f
        z_m = draw_responsibilities(z, m)
        with np.errstate(invalid="ignore"):
            total += float(np.sum(np.where(z_m > 0, z_m * joint, 0.0)))
    return total / rebased.M - kl_to_prior(post)


def update_variational(
    data: Dataset,
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    responsibilities: np.ndarray,
    M: int,
    seed,
    step_controls: Optional[NewtonControls] = None,
    draws: Optional[RandomEffectDraws] = None,
    diagnostics: Optional[List[str]] = None,
) -> VariationalPosterior:
    """CMステップ(ii): 変分パラメータをレベルごとに減衰Newton法で更新します。

    w = μ + σ v の再パラメータ化により期待値項の勾配・ヘッセ行列を求め、KL項は厳密な微分を用います。
    各因子の (μ, log σ²) は 2×2 のNewtonステップで更新し、目的関数が減少する因子は
    ステップを最大 max_halvings 回半減します。それでも上昇しない因子は前の値を保持します。

    Args:
        data: データセット
        model: 更新後のモデル
        post: 現在の変分事後分布
        responsibilities: E-ステップの責任度（n×g、またはサンプルごとの M×n×g）
        M: サンプル数（draws を与えない場合に使用）
        seed: 乱数シード（draws を与えない場合に使用）
        step_controls: Newton法の制御値
        draws: 共通乱数として使う標準正規乱数を含むサンプル
        diagnostics: 警告メッセージの追記先

    Returns:
        VariationalPosterior: 更新後の変分事後分布
    """
    if model.L == 0:
        return post
    controls = step_controls or NewtonControls()
    v = draws.v if draws is not None else standard_normal_draws(post.design, M, seed)
    z = _check_responsibilities(data, model, responsibilities, v[0].shape[0])

    mu = [np.array(m, copy=True) for m in post.mu]
    log_sigma2 = [np.log(s) for s in post.sigma2]

    for level in range(model.L):
        objective = _LevelObjective(data, model, z, v, mu, log_sigma2, level)
        values, terms = objective.evaluate(mu[level], log_sigma2[level])
        for _ in range(controls.max_iters):
            step_mu, step_rho = _newton_direction(*terms)
            scale = np.ones(objective.size)
            pending = np.ones(objective.size, dtype=bool)
            new_mu = mu[level].copy()
            new_rho = log_sigma2[level].copy()
            new_values = values.copy()
            for _ in range(controls.max_halvings + 1):
                cand_mu = mu[level] + scale * step_mu
                cand_rho = np.maximum(log_sigma2[level] + scale * step_rho, _LOG_SIGMA2_FLOOR)
                cand_values, _ = objective.evaluate(cand_mu, cand_rho, derivatives=False)
                ok = pending & np.isfinite(cand_values) & (cand_values >= values - 1e-12 * np.abs(values))
                new_mu[ok] = cand_mu[ok]
                new_rho[ok] = cand_rho[ok]
                new_values[ok] = cand_values[ok]
                pending &= ~ok
                if not np.any(pending):
                    break
                scale[pending] *= 0.5

            if np.any(pending):
                message = f"レベル {level + 1} の {int(pending.sum())} 個の因子で変分更新が停滞しました（前の値を保持）"
                logger.warning(message)
                if diagnostics is not None:
                    diagnostics.append(message)

            improvement = float(new_values.sum() - values.sum())
            mu[level], log_sigma2[level] = new_mu, new_rho
            values, terms = objective.evaluate(mu[level], log_sigma2[level])
            if improvement <= controls.tol * (1.0 + abs(float(values.sum()))):
                break

    return VariationalPosterior(mu=tuple(mu), sigma2=tuple(np.exp(r) for r in log_sigma2))
