#!/usr/bin/env python
"""
確率的変分ECMによるモデル推定

CMM（クラスタ化モーメント法）による初期化、モンテカルロE-ステップ、
ゲーティング係数の確率的IRLS、エキスパートの重み付き最尤推定、
変分パラメータの更新、およびELBOによる収束判定を提供します。
"""

import logging
import warnings
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .errors import InitializationError, InvalidArgumentError, InvalidConfigurationError, NumericalError
from .experts import ExpertFamily, get_family
from .mixed_lrmoe import (
    Dataset,
    MixedLRMoEModel,
    expert_log_density_matrix,
    log_gating,
    log_joint_matrix,
    responsibilities_from_log_joint,
)
from .variational import (
    NewtonControls,
    RandomEffectDraws,
    VariationalPosterior,
    draw_responsibilities,
    elbo_from_draws,
    monitor_normals,
    sample_w,
    update_variational,
)

logger = logging.getLogger(__name__)


def _normalize_expert_spec(experts: Any, g: int) -> Tuple[Tuple[str, ...], ...]:
    if isinstance(experts, str):
        return tuple((experts,) for _ in range(g))
    rows = list(experts)
    if len(rows) != g:
        raise InvalidConfigurationError(f"experts の行数 {len(rows)} がクラス数 g = {g} と一致しません")
    grid = tuple((row,) if isinstance(row, str) else tuple(row) for row in rows)
    if len({len(row) for row in grid}) != 1 or len(grid[0]) < 1:
        raise InvalidConfigurationError("experts は各クラスで同じ次元数 D を持つ必要があります")
    return grid


@dataclass
class FitConfig:
    """推定の設定

    Attributes:
        g: 潜在クラス数
        experts: 分布族タグ。文字列（全クラス共通・D = 1）、長さ g のリスト、または g×D のリスト
        M: 各反復のモンテカルロサンプル数
        max_ecm_iters: ECMの最大反復回数
        elbo_rel_tol: 窓内のELBO相対改善量の収束判定値
        elbo_window: 収束判定の窓幅
        irls_max_iters: ゲーティングIRLSの最大サイクル数
        irls_grad_tol: ゲーティング勾配の収束判定値（最大絶対値）
        vi_max_iters: 変分更新のレベルごとの最大Newton反復回数
        seed: 乱数シード
        hessian_ridge: ヘッセ行列の正則化量
        kmeans_restarts: 空クラスタ発生時のk-means再試行回数
        max_halvings: ステップ半減の最大回数
        frozen_mass: クラスを凍結する責任度の総和の閾値（n に対する比率）
        refresh_draws: 真なら反復ごとに新しい標準正規乱数を使う（既定は推定全体で共通の乱数）
    """

    g: int
    experts: Any = "gamma"
    M: int = 5
    max_ecm_iters: int = 200
    elbo_rel_tol: float = 1e-6
    elbo_window: int = 5
    irls_max_iters: int = 20
    irls_grad_tol: float = 1e-6
    vi_max_iters: int = 20
    seed: int = 0
    hessian_ridge: float = 1e-8
    kmeans_restarts: int = 10
    max_halvings: int = 20
    frozen_mass: float = 1e-8
    refresh_draws: bool = False

    def validate(self) -> None:
        """設定値を検証します。

        Raises:
            InvalidConfigurationError: 不正なフィールドがある場合（フィールド名を含む）
        """
        counts = ("g", "M", "max_ecm_iters", "elbo_window", "irls_max_iters", "vi_max_iters", "kmeans_restarts")
        for name in counts:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidConfigurationError(f"'{name}' は1以上の整数である必要があります: {value!r}")
        for name in ("elbo_rel_tol", "irls_grad_tol"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not np.isfinite(value) or value <= 0:
                raise InvalidConfigurationError(f"'{name}' は正の有限値である必要があります: {value!r}")
        for name in ("hessian_ridge", "frozen_mass"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not np.isfinite(value) or value < 0:
                raise InvalidConfigurationError(f"'{name}' は0以上の有限値である必要があります: {value!r}")
        if not isinstance(self.max_halvings, (int, np.integer)) or self.max_halvings < 0:
            raise InvalidConfigurationError(f"'max_halvings' は0以上の整数である必要があります: {self.max_halvings!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise InvalidConfigurationError(f"'seed' は0以上の整数である必要があります: {self.seed!r}")
        if not isinstance(self.refresh_draws, (bool, np.bool_)):
            raise InvalidConfigurationError(f"'refresh_draws' は真偽値である必要があります: {self.refresh_draws!r}")
        for row in self.expert_spec:
            for tag in row:
                get_family(tag)

    @property
    def expert_spec(self) -> Tuple[Tuple[str, ...], ...]:
        """g×D の分布族タグのグリッド"""
        return _normalize_expert_spec(self.experts, self.g)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["experts"] = [list(row) for row in self.expert_spec]
        return data


@dataclass
class FitReport:
    """推定結果のレポート

    Attributes:
        elbo_trace: 各反復のELBO推定値
        converged: 収束したかどうか
        reason: 停止理由（"elbo_converged" または "max_iterations"）
        n_params: 実効パラメータ数
        iterations: 実行した反復回数
        initial_elbo: 初期値でのELBO推定値
        class_masses: 最終の責任度の列平均（クラス構成比）
        warnings: 推定中の警告メッセージ
        seed: 使用した乱数シード
        elbo_samples: ELBOの推移の計算に使ったサンプル数（評価時の既定値）
    """

    elbo_trace: List[float] = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    n_params: int = 0
    iterations: int = 0
    initial_elbo: float = float("nan")
    class_masses: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    seed: int = 0
    elbo_samples: int = 0

    @property
    def final_elbo(self) -> float:
        return self.elbo_trace[-1] if self.elbo_trace else self.initial_elbo

    @property
    def aic(self) -> float:
        return 2.0 * self.n_params - 2.0 * self.final_elbo

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FitReport":
        known = {key: data[key] for key in cls.__dataclass_fields__ if key in data}
        return cls(**known)


def effective_param_count(model: MixedLRMoEModel) -> int:
    """実効パラメータ数 (g−1)P + max(g−2, 0)L + Σ エキスパートのパラメータ数 を返します。

    変分パラメータは含みません。
    """
    gating = (model.g - 1) * model.P
    loadings = max(model.g - 2, 0) * model.L
    experts = sum(expert.n_params for row in model.experts for expert in row)
    return gating + loadings + experts


def _warn(message: str, diagnostics: Optional[List[str]]) -> None:
    logger.warning(message)
    if diagnostics is not None:
        diagnostics.append(message)


def _cluster_labels(features: np.ndarray, g: int, config: FitConfig, diagnostics: Optional[List[str]]) -> np.ndarray:
    """k-means で g 個のクラスタに分け、中心の昇順に並べたラベルを返します。"""
    labels = None
    for attempt in range(config.kmeans_restarts):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            kmeans = KMeans(n_clusters=g, n_init=10, random_state=config.seed + attempt).fit(features)
        counts = np.bincount(kmeans.labels_, minlength=g)
        order = np.argsort(kmeans.cluster_centers_.mean(axis=1), kind="stable")
        rank = np.empty(g, dtype=int)
        rank[order] = np.arange(g)
        labels = rank[kmeans.labels_]
        if np.all(counts > 0):
            return labels
        logger.info(f"k-means で空クラスタが発生しました（試行 {attempt + 1}/{config.kmeans_restarts}）")
    _warn(f"k-means の再試行後も空クラスタが残りました（{config.kmeans_restarts} 回）", diagnostics)
    return _reseed_empty_clusters(features, labels, g, diagnostics)


def _reseed_empty_clusters(
    features: np.ndarray, labels: np.ndarray, g: int, diagnostics: Optional[List[str]]
) -> np.ndarray:
    """空のクラスタに、最大クラスタの中心から遠い側の半分の点を割り当てます。

    割り当て後は中心の昇順にラベルを付け直します。
    """
    labels = labels.copy()
    for j in range(g):
        counts = np.bincount(labels, minlength=g)
        if counts[j] > 0:
            continue
        largest = int(np.argmax(counts))
        members = np.flatnonzero(labels == largest)
        distance = np.linalg.norm(features[members] - features[members].mean(axis=0), axis=1)
        farthest = members[np.argsort(distance, kind="stable")[members.size - members.size // 2 :]]
        labels[farthest] = j
        _warn(f"空のクラスタ {j + 1} をクラスタ {largest + 1} の中心から遠い {farthest.size} 点で初期化します", diagnostics)
    centers = np.array([features[labels == j].mean() for j in range(g)])
    rank = np.empty(g, dtype=int)
    rank[np.argsort(centers, kind="stable")] = np.arange(g)
    return rank[labels]


def cmm_initialize(
    data: Dataset, config: FitConfig, diagnostics: Optional[List[str]] = None
) -> Tuple[MixedLRMoEModel, VariationalPosterior]:
    """クラスタ化モーメント法（CMM）で初期パラメータを求めます。

    log(1 + y) 上の k-means で応答を g 個に分け、各クラスタのモーメントを
    エキスパートに合わせます。α の切片はクラスタ構成比 log(p_j / p_g)、
    β は識別性パターン、変分事後分布は事前分布に設定します。

    Args:
        data: データセット
        config: 推定の設定
        diagnostics: 警告メッセージの追記先

    Returns:
        Tuple[MixedLRMoEModel, VariationalPosterior]: 初期モデルと初期事後分布

    Raises:
        InvalidConfigurationError: n < g の場合や、クラスタにエキスパートを当てはめられない場合
    """
    g = config.g
    spec = config.expert_spec
    if data.n < g:
        raise InvalidConfigurationError(f"観測数 n = {data.n} がクラス数 g = {g} より少なくなっています")
    if len(spec[0]) != data.D:
        raise InvalidConfigurationError(f"experts の次元数 {len(spec[0])} が応答の次元数 D = {data.D} と一致しません")

    if g == 1:
        labels = np.zeros(data.n, dtype=int)
    else:
        features = np.log1p(np.maximum(data.Y, 0.0))
        labels = _cluster_labels(features, g, config, diagnostics)

    counts = np.bincount(labels, minlength=g)
    experts = []
    for j in range(g):
        rows = labels == j
        row = []
        for d, tag in enumerate(spec[j]):
            try:
                row.append(get_family(tag).from_moments(data.Y[rows, d]))
            except InvalidConfigurationError as e:
                raise InvalidConfigurationError(f"クラス {j + 1} の初期化に失敗しました: {str(e)}")
        experts.append(tuple(row))

    shares = np.maximum(counts, 1) / data.n
    alpha = np.zeros((g, data.P))
    alpha[:, 0] = np.log(shares / shares[-1])
    alpha, beta = MixedLRMoEModel.pin_identifiability(alpha, np.zeros((g, data.L)))
    model = MixedLRMoEModel(alpha=alpha, beta=beta, experts=tuple(experts), design=data.design)
    logger.info(f"CMM初期化: クラスタ構成比 {np.round(counts / data.n, 4).tolist()}")
    return model, VariationalPosterior.prior(data.design)


def _observation_draws(data: Dataset, draws: Optional[RandomEffectDraws]) -> List[np.ndarray]:
    if data.L == 0 or draws is None:
        return [np.zeros((data.n, 0))]
    return [draws.observation_matrix(m, data.factor_index) for m in range(draws.M)]


def e_step(
    data: Dataset,
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    M: int,
    seed,
    draws: Optional[RandomEffectDraws] = None,
    diagnostics: Optional[List[str]] = None,
    per_draw: bool = False,
) -> np.ndarray:
    """モンテカルロE-ステップ: ẑ_ij = (1/M) Σ_m E[Z_ij | X, Y, w^[m]]

    Args:
        data: データセット
        model: モデル
        post: 変分事後分布
        M: サンプル数
        seed: 乱数シード（draws を与えない場合に使用）
        draws: 共通乱数として使うサンプル
        diagnostics: 警告メッセージの追記先
        per_draw: True ならサンプルごとの責任度 z^[m] を平均せずに返す

    Returns:
        np.ndarray: n×g の責任度（各行の和は1）。per_draw なら M×n×g
    """
    if M < 1:
        raise InvalidArgumentError(f"サンプル数 M は1以上である必要があります: {M}")
    if data.L > 0 and draws is None:
        draws = sample_w(post, seed, M)
    log_f = expert_log_density_matrix(data.Y, model)
    W_list = _observation_draws(data, draws)
    stacked = np.stack(
        [responsibilities_from_log_joint(log_joint_matrix(data, model, W, log_f), diagnostics) for W in W_list]
    )
    if per_draw:
        return stacked
    z = stacked.mean(axis=0)
    return z / z.sum(axis=1, keepdims=True)


def _check_gating_responsibilities(data: Dataset, g: int, z: np.ndarray, M: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape == (data.n, g) or z.shape == (M, data.n, g):
        return z
    raise InvalidArgumentError(f"責任度の形状 {z.shape} が (n, g) = ({data.n}, {g}) と一致しません")


def q1_objective(
    data: Dataset, responsibilities: np.ndarray, alpha: np.ndarray, beta: np.ndarray, W_list: Sequence[np.ndarray]
) -> float:
    """ゲーティング部分の目的関数 Q_1 = (1/M) Σ_m Σ_i Σ_j z_ij log π_ij(w^[m]) を返します。

    responsibilities が M×n×g のときは z をサンプルごとの z^[m] に置き換えます。
    """
    total = 0.0
    for m, W in enumerate(W_list):
        total += float(np.sum(draw_responsibilities(responsibilities, m) * log_gating(data.X, W, alpha, beta)))
    return total / len(W_list)


def gating_gradient_hessian(
    data: Dataset,
    responsibilities: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    W_list: Sequence[np.ndarray],
    j: int,
    block: str = "alpha",
) -> Tuple[np.ndarray, np.ndarray]:
    """クラス j の α_j（または β_j）に関する Q_1 の勾配とヘッセ行列を返します。

    勾配 = (1/M) Σ_m Σ_i (z_ij − π_ij Σ_j' z_ij') u_i、
    ヘッセ行列 = −(1/M) Σ_m Σ_i (Σ_j' z_ij') π_ij (1 − π_ij) u_i u_i^T。
    u_i は block が "alpha" なら x_i、"beta" なら w_i です。
    """
    dim = alpha.shape[1] if block == "alpha" else beta.shape[1]
    gradient = np.zeros(dim)
    hessian = np.zeros((dim, dim))
    for m, W in enumerate(W_list):
        z = draw_responsibilities(responsibilities, m)
        z_sum = z.sum(axis=1)
        U = data.X if block == "alpha" else W
        pi_j = np.exp(log_gating(data.X, W, alpha, beta)[:, j])
        gradient += U.T @ (z[:, j] - pi_j * z_sum)
        curvature = z_sum * pi_j * (1.0 - pi_j)
        hessian -= (U * curvature[:, None]).T @ U
    return gradient / len(W_list), hessian / len(W_list)


def _newton_block(
    data: Dataset,
    z: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    W_list: Sequence[np.ndarray],
    j: int,
    block: str,
    config: FitConfig,
    diagnostics: Optional[List[str]],
) -> Tuple[np.ndarray, np.ndarray, float]:
    gradient, hessian = gating_gradient_hessian(data, z, alpha, beta, W_list, j, block)
    grad_norm = float(np.max(np.abs(gradient))) if gradient.size else 0.0
    if grad_norm == 0.0:
        return alpha, beta, grad_norm
    regularized = hessian - config.hessian_ridge * np.eye(gradient.size)
    try:
        step = -np.linalg.solve(regularized, gradient)
    except np.linalg.LinAlgError:
        _warn(f"クラス {j + 1} の {block} のヘッセ行列が特異なため更新をスキップしました", diagnostics)
        return alpha, beta, grad_norm
    if not np.all(np.isfinite(step)):
        _warn(f"クラス {j + 1} の {block} のNewtonステップが非有限のため更新をスキップしました", diagnostics)
        return alpha, beta, grad_norm

    current = q1_objective(data, z, alpha, beta, W_list)
    scale = 1.0
    for _ in range(config.max_halvings + 1):
        cand_alpha, cand_beta = alpha.copy(), beta.copy()
        if block == "alpha":
            cand_alpha[j] = alpha[j] + scale * step
        else:
            cand_beta[j] = beta[j] + scale * step
        candidate = q1_objective(data, z, cand_alpha, cand_beta, W_list)
        if np.isfinite(candidate) and candidate >= current:
            return cand_alpha, cand_beta, grad_norm
        scale *= 0.5
    logger.debug(f"クラス {j + 1} の {block} はステップ半減後も Q_1 が改善しないため据え置きます")
    return alpha, beta, grad_norm


def cm_step_gating(
    data: Dataset,
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    responsibilities: np.ndarray,
    M: int,
    seed,
    config: FitConfig,
    draws: Optional[RandomEffectDraws] = None,
    diagnostics: Optional[List[str]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """CMステップ(i)前半: ゲーティング係数 α, β を確率的IRLSで更新します。

    各クラス j < g の α_j を、w ~ q のモンテカルロ平均した勾配・ヘッセ行列による
    Newton法で更新し、続いて自由な β_j（第1・最終クラス以外）を同様に更新します。
    各ステップは共通乱数での Q_1 が減少しない場合のみ採用し、減少する場合は半減します。
    responsibilities は n×g、またはサンプルごとの M×n×g を受け付けます。

    Returns:
        Tuple[np.ndarray, np.ndarray]: 更新後の (alpha, beta)（識別性制約を満たす）
    """
    if data.L > 0 and draws is None:
        draws = sample_w(post, seed, M)
    W_list = _observation_draws(data, draws)
    z = _check_gating_responsibilities(data, model.g, responsibilities, len(W_list))
    alpha = np.array(model.alpha, copy=True)
    beta = np.array(model.beta, copy=True)

    for _ in range(config.irls_max_iters):
        max_grad = 0.0
        for j in range(model.g - 1):
            alpha, beta, grad_norm = _newton_block(data, z, alpha, beta, W_list, j, "alpha", config, diagnostics)
            max_grad = max(max_grad, grad_norm)
        if data.L > 0:
            for j in range(1, model.g - 1):
                alpha, beta, grad_norm = _newton_block(data, z, alpha, beta, W_list, j, "beta", config, diagnostics)
                max_grad = max(max_grad, grad_norm)
        if max_grad < config.irls_grad_tol:
            break
    return MixedLRMoEModel.pin_identifiability(alpha, beta)


def cm_step_experts(
    data: Dataset,
    responsibilities: np.ndarray,
    expert_spec: Sequence[Sequence[str]],
    current: Optional[Sequence[Sequence[ExpertFamily]]] = None,
    frozen_mass: float = 1e-8,
    diagnostics: Optional[List[str]] = None,
) -> Tuple[Tuple[ExpertFamily, ...], ...]:
    """CMステップ(i)後半: 各クラス・各次元のエキスパートを重み付き最尤推定で更新します。

    Args:
        data: データセット
        responsibilities: n×g の責任度
        expert_spec: g×D の分布族タグ
        current: 現在のエキスパート（更新で重み付き対数尤度が下がる場合は現在値を保持）
        frozen_mass: 責任度の総和がこの値×n 未満のクラスは凍結
        diagnostics: 警告メッセージの追記先

    Returns:
        g×D のエキスパートのグリッド

    Raises:
        InvalidConfigurationError: ゼロ過剰でない分布族のクラスの重みがすべて y = 0 にある場合
    """
    z = np.asarray(responsibilities, dtype=float)
    spec = [tuple(row) for row in expert_spec]
    if z.shape != (data.n, len(spec)):
        raise InvalidArgumentError(f"責任度の形状 {z.shape} が (n, g) = ({data.n}, {len(spec)}) と一致しません")

    updated = []
    for j, row in enumerate(spec):
        weights = z[:, j]
        mass = float(weights.sum())
        new_row = []
        for d, tag in enumerate(row):
            family = get_family(tag)
            y = data.Y[:, d]
            previous = current[j][d] if current is not None else None
            if mass < frozen_mass * data.n:
                _warn(f"クラス {j + 1} の責任度の総和 {mass:.3g} が小さいため凍結します", diagnostics)
                new_row.append(previous if previous is not None else family.from_moments(y))
                continue
            if not family.zero_inflated and float(np.sum(weights * (y > 0))) <= 0.0:
                raise InvalidConfigurationError(
                    f"クラス {j + 1} の応答がすべて0ですが、分布族 '{family.name}' は y = 0 を扱えません"
                )
            start = previous if previous is not None else family.from_moments(y[weights > 0])
            candidate = start.fit_weighted(y, weights)
            if previous is not None and candidate.weighted_loglik(y, weights) < previous.weighted_loglik(y, weights):
                candidate = previous
            new_row.append(candidate)
        updated.append(tuple(new_row))
    return tuple(updated)


SPLIT_JITTER = 1e-4


def split_class(
    data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, jitter: float = SPLIT_JITTER
) -> MixedLRMoEModel:
    """平均ゲーティング確率が最大のクラスを2つに分け、g + 1 クラスのモデルを返します。

    分割したクラスの切片に log(1/2) を加えて複製を隣に挿入するため、ゲーティングの混合は
    変わりません（g = 1 かつ L > 0 の場合のみ、第1クラスの β を1に固定する制約で変わります）。
    複製した2つのエキスパートは制約なしパラメータを ±jitter ずらし、1次の変化は打ち消し合います。

    Args:
        data: データセット（ランダム効果は事後平均で評価）
        model: g クラスのモデル
        post: 変分事後分布
        jitter: エキスパートのずらし幅

    Returns:
        MixedLRMoEModel: g + 1 クラスのモデル
    """
    W = np.zeros((data.n, 0))
    if data.L > 0:
        W = np.column_stack([post.mu[level][data.factor_index[:, level]] for level in range(data.L)])
    shares = np.exp(log_gating(data.X, W, model.alpha, model.beta)).mean(axis=0)
    k = int(np.argmax(shares))
    position = k + 1 if k < model.g - 1 else model.g - 1

    alpha = np.insert(np.array(model.alpha), position, model.alpha[k], axis=0)
    beta = np.insert(np.array(model.beta), position, model.beta[k], axis=0)
    alpha[[k, k + 1], 0] += np.log(0.5)
    alpha -= alpha[-1]
    beta -= beta[-1]
    alpha, beta = MixedLRMoEModel.pin_identifiability(alpha, beta)

    original = model.experts[k]
    experts = list(model.experts)
    experts[k] = tuple(expert.jittered(jitter) for expert in original)
    experts.insert(position, tuple(expert.jittered(-jitter) for expert in original))
    logger.info(f"クラス {k + 1}（平均ゲーティング確率 {shares[k]:.4f}）を分割して g = {model.g + 1} に埋め込みます")
    return MixedLRMoEModel(alpha=alpha, beta=beta, experts=tuple(experts), design=model.design)


def _check_warm_start(
    data: Dataset,
    config: FitConfig,
    model: MixedLRMoEModel,
    post: VariationalPosterior,
    diagnostics: Optional[List[str]] = None,
):
    if model.g > config.g or model.P != data.P or model.D != data.D:
        raise InvalidConfigurationError(
            f"初期モデルの形状 (g={model.g}, P={model.P}, D={model.D}) がデータ・設定と一致しません"
        )
    if model.design != data.design:
        raise InvalidConfigurationError(f"初期モデルの設計 {model.design.S} がデータの設計 {data.design.S} と一致しません")
    if post.design != data.design:
        post = post.extended(data.design)
    while model.g < config.g:
        if model.g == 1 and data.L > 0:
            _warn("g = 1 からの埋め込みでは第1クラスの β が1に固定されるため、初期ELBOは元のモデルと一致しません", diagnostics)
        model = split_class(data, model, post)
    families = tuple(tuple(expert.name for expert in row) for row in model.experts)
    if families != config.expert_spec:
        raise InvalidConfigurationError(f"初期モデルの分布族 {families} が設定の experts {config.expert_spec} と一致しません")
    return model, post


def _has_converged(trace: List[float], config: FitConfig) -> bool:
    if len(trace) <= config.elbo_window:
        return False
    previous = trace[-1 - config.elbo_window]
    improvement = trace[-1] - previous
    return improvement <= config.elbo_rel_tol * max(abs(previous), 1.0)


def fit(
    data: Dataset,
    config: FitConfig,
    init: Optional[Tuple[MixedLRMoEModel, VariationalPosterior]] = None,
) -> Tuple[MixedLRMoEModel, VariationalPosterior, FitReport]:
    """確率的変分ECMでモデルを推定します。

    標準正規乱数 v を推定全体で固定し（共通乱数）、各反復で現在の事後分布により
    w = μ + σ v を作り直して E-ステップ → ゲーティング更新 → エキスパート更新 → 変分更新
    に用います。ELBOの推移も同じ v で評価します。ゲーティングと変分更新はサンプルごとの
    責任度 z^[m] を使うため、各CMステップが下げない目的関数は監視用ELBOの下界となり、
    ELBOの推移は（浮動小数点誤差を除いて）単調非減少です。

    config.refresh_draws が真の場合は反復ごとに新しい v を使います（推移は単調とは限りません）。

    Args:
        data: データセット
        config: 推定の設定
        init: ウォームスタート用の (モデル, 事後分布)。省略時はCMMで初期化。
            クラス数が config.g より小さいモデルは embed_in_larger_model で埋め込みます

    Returns:
        Tuple[MixedLRMoEModel, VariationalPosterior, FitReport]: 推定結果

    Raises:
        InvalidConfigurationError: 設定が不正な場合
        InitializationError: 初期値でのELBOが −∞ の場合
        NumericalError: 反復中にELBOが非有限になった場合
    """
    config.validate()
    diagnostics: List[str] = []
    if init is None:
        model, post = cmm_initialize(data, config, diagnostics)
    else:
        model, post = _check_warm_start(data, config, *init, diagnostics=diagnostics)

    monitor_v = monitor_normals(data.design, config.M, config.seed) if data.L > 0 else None
    if config.refresh_draws and data.L > 0:
        iteration_seeds = np.random.SeedSequence(config.seed).spawn(config.max_ecm_iters + 1)[1:]
    else:
        iteration_seeds = None

    def current_draws(post: VariationalPosterior, iteration: int) -> Optional[RandomEffectDraws]:
        if monitor_v is None:
            return None
        if iteration_seeds is None:
            return RandomEffectDraws.from_standard_normals(post, monitor_v, config.M)
        return sample_w(post, iteration_seeds[iteration], config.M)

    def monitored_elbo(model: MixedLRMoEModel, post: VariationalPosterior) -> float:
        if monitor_v is None:
            return elbo_from_draws(data, model, post, None)
        return elbo_from_draws(data, model, post, RandomEffectDraws.from_standard_normals(post, monitor_v, config.M))

    initial_elbo = monitored_elbo(model, post)
    if not np.isfinite(initial_elbo):
        raise InitializationError(
            f"初期値でのELBOが有限ではありません: {initial_elbo}", diagnostics=list(diagnostics)
        )
    logger.info(f"推定開始: n={data.n}, g={config.g}, L={data.L}, 初期ELBO={initial_elbo:.6f}")

    controls = NewtonControls(max_iters=config.vi_max_iters, max_halvings=config.max_halvings)
    report = FitReport(initial_elbo=float(initial_elbo), seed=int(config.seed), elbo_samples=int(config.M))
    z = None
    for iteration in range(config.max_ecm_iters):
        draws = current_draws(post, iteration)
        z_draws = e_step(data, model, post, config.M, None, draws=draws, diagnostics=diagnostics, per_draw=True)
        z = z_draws.mean(axis=0)

        alpha, beta = cm_step_gating(
            data, model, post, z_draws, config.M, None, config, draws=draws, diagnostics=diagnostics
        )
        model = model.with_parameters(alpha=alpha, beta=beta)
        experts = cm_step_experts(
            data, z, config.expert_spec, current=model.experts, frozen_mass=config.frozen_mass, diagnostics=diagnostics
        )
        model = model.with_parameters(experts=experts)
        if data.L > 0:
            post = update_variational(
                data, model, post, z_draws, config.M, None, step_controls=controls, draws=draws, diagnostics=diagnostics
            )
        elbo = monitored_elbo(model, post)

        if not np.isfinite(elbo):
            raise NumericalError(f"反復 {iteration + 1} でELBOが非有限になりました: {elbo}")
        report.elbo_trace.append(float(elbo))
        logger.debug(f"反復 {iteration + 1}: ELBO={elbo:.6f}")
        if _has_converged(report.elbo_trace, config):
            report.converged = True
            report.reason = "elbo_converged"
            break

    if not report.converged:
        report.reason = "max_iterations"
    report.iterations = len(report.elbo_trace)
    report.n_params = effective_param_count(model)
    report.class_masses = (z.mean(axis=0).tolist() if z is not None else [])
    report.warnings = list(dict.fromkeys(diagnostics))
    logger.info(
        f"推定終了: 反復 {report.iterations} 回, 最終ELBO={report.final_elbo:.6f}, 停止理由={report.reason}"
    )
    return model, post, report
