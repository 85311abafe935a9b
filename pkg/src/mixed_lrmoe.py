#!/usr/bin/env python
"""
Mixed LRMoE モデル

データセット・ランダム効果の設計・モデルパラメータの型と、
ゲーティング確率、条件付き尤度（ランダム効果 w を与えたときの尤度）、
潜在クラスの責任度の計算を提供します。

混合・ゲーティングの計算はすべて log-sum-exp による対数空間で行います。
ランダム効果の因子番号は 0 始まりで保持します。
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError
from .experts import ExpertFamily, expert_from_dict

logger = logging.getLogger(__name__)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class RandomEffectDesign:
    """ランダム効果の設計

    Attributes:
        S: 各レベルの因子数 S_l のタプル（長さ L）
    """

    S: Tuple[int, ...] = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.S)
        if any(s < 1 for s in sizes):
            raise InvalidArgumentError(f"各レベルの因子数は1以上である必要があります: {sizes}")
        object.__setattr__(self, "S", sizes)

    @property
    def L(self) -> int:
        """ランダム効果のレベル数"""
        return len(self.S)


@dataclass(frozen=True)
class Dataset:
    """共変量・応答・因子割り当てをまとめたデータセット

    Attributes:
        X: n×P の共変量行列（0列目は切片で常に1）
        Y: n×D の応答行列
        factor_index: n×L の整数行列。(i, l) 要素は観測 i のレベル l の因子番号 c_l(i)（0始まり）
        design: ランダム効果の設計
    """

    X: np.ndarray
    Y: np.ndarray
    factor_index: np.ndarray
    design: RandomEffectDesign

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2:
            raise InvalidArgumentError("X と Y は2次元配列である必要があります")
        n = X.shape[0]
        if n < 1 or X.shape[1] < 1 or Y.shape[1] < 1:
            raise InvalidArgumentError(f"n, P, D はいずれも1以上である必要があります: X{X.shape}, Y{Y.shape}")
        if Y.shape[0] != n:
            raise InvalidArgumentError(f"X と Y の行数が一致しません: {n} != {Y.shape[0]}")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(Y)):
            raise InvalidArgumentError("X または Y に非有限値が含まれています")
        if not np.all(X[:, 0] == 1.0):
            raise InvalidArgumentError("X の0列目（切片）はすべて1である必要があります")

        if self.factor_index is None:
            factor_index = np.zeros((n, 0), dtype=np.int64)
        else:
            factor_index = np.asarray(self.factor_index, dtype=np.int64)
            if factor_index.ndim == 1:
                factor_index = factor_index[:, None]
        if factor_index.shape != (n, self.design.L):
            raise InvalidArgumentError(
                f"factor_index の形状 {factor_index.shape} が (n, L) = ({n}, {self.design.L}) と一致しません"
            )
        for level, size in enumerate(self.design.S):
            column = factor_index[:, level]
            if column.min() < 0 or column.max() >= size:
                raise InvalidArgumentError(f"レベル {level + 1} の因子番号が範囲 [0, {size}) の外にあります")

        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "Y", _readonly(Y))
        object.__setattr__(self, "factor_index", _readonly(factor_index))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @property
    def D(self) -> int:
        return self.Y.shape[1]

    @property
    def L(self) -> int:
        return self.design.L

    def subset(self, rows: np.ndarray) -> "Dataset":
        """指定した行だけを持つデータセットを返します（設計は共有）。"""
        rows = np.asarray(rows)
        return Dataset(X=self.X[rows], Y=self.Y[rows], factor_index=self.factor_index[rows], design=self.design)

    def factor_counts(self, level: int) -> np.ndarray:
        """レベル l の因子ごとの観測数"""
        return np.bincount(self.factor_index[:, level], minlength=self.design.S[level])


@dataclass(frozen=True)
class RandomEffectsRealization:
    """ランダム効果の実現値

    Attributes:
        w: レベルごとの実数ベクトルのタプル（w[l] の長さは S_l）
    """

    w: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        values = tuple(_readonly(np.asarray(level, dtype=float).ravel()) for level in self.w)
        for level in values:
            if not np.all(np.isfinite(level)):
                raise InvalidArgumentError("ランダム効果に非有限値が含まれています")
        object.__setattr__(self, "w", values)

    @property
    def L(self) -> int:
        return len(self.w)

    def per_observation(self, factor_index: np.ndarray) -> np.ndarray:
        """因子割り当てから観測ごとの n×L 行列 w_i を組み立てます。"""
        n = factor_index.shape[0]
        if factor_index.shape[1] != self.L:
            raise InvalidArgumentError(f"ランダム効果のレベル数 {self.L} が factor_index の列数と一致しません")
        if self.L == 0:
            return np.zeros((n, 0))
        return np.column_stack([self.w[level][factor_index[:, level]] for level in range(self.L)])

    @classmethod
    def zeros(cls, design: RandomEffectDesign) -> "RandomEffectsRealization":
        return cls(w=tuple(np.zeros(size) for size in design.S))


@dataclass(frozen=True)
class MixedLRMoEModel:
    """Mixed LRMoE モデルのパラメータ

    識別性のため、最終クラスの α と β は0、第1クラスの β は1に固定されます
    （g = 1 のときは単一クラスが参照クラスとなり α, β ともに0）。

    Attributes:
        alpha: g×P のゲーティング係数
        beta: g×L のランダム効果の係数
        experts: g×D のエキスパート関数のグリッド
        design: ランダム効果の設計
    """

    alpha: np.ndarray
    beta: np.ndarray
    experts: Tuple[Tuple[ExpertFamily, ...], ...]
    design: RandomEffectDesign

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        g = alpha.shape[0] if alpha.ndim == 2 else 0
        if g < 1:
            raise InvalidArgumentError("クラス数 g は1以上である必要があります")
        beta = np.asarray(self.beta, dtype=float).reshape(g, self.design.L)
        experts = tuple(tuple(row) for row in self.experts)
        if len(experts) != g or len({len(row) for row in experts}) != 1 or len(experts[0]) < 1:
            raise InvalidArgumentError(f"experts は g×D（g = {g}）のグリッドである必要があります")
        if not all(isinstance(e, ExpertFamily) for row in experts for e in row):
            raise InvalidArgumentError("experts の要素は ExpertFamily である必要があります")
        if not np.all(np.isfinite(alpha)) or not np.all(np.isfinite(beta)):
            raise InvalidArgumentError("alpha または beta に非有限値が含まれています")
        if np.any(alpha[-1] != 0.0) or np.any(beta[-1] != 0.0):
            raise InvalidArgumentError("識別性制約違反: 最終クラスの alpha と beta は0である必要があります")
        if g >= 2 and np.any(beta[0] != 1.0):
            raise InvalidArgumentError("識別性制約違反: 第1クラスの beta は1である必要があります")
        object.__setattr__(self, "alpha", _readonly(alpha))
        object.__setattr__(self, "beta", _readonly(beta))
        object.__setattr__(self, "experts", experts)

    @property
    def g(self) -> int:
        return self.alpha.shape[0]

    @property
    def P(self) -> int:
        return self.alpha.shape[1]

    @property
    def L(self) -> int:
        return self.design.L

    @property
    def D(self) -> int:
        return len(self.experts[0])

    @staticmethod
    def pin_identifiability(alpha: np.ndarray, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """識別性制約を満たすように α, β の固定行を設定したコピーを返します。"""
        alpha = np.array(alpha, dtype=float, copy=True)
        beta = np.array(beta, dtype=float, copy=True)
        alpha[-1] = 0.0
        beta[-1] = 0.0
        if alpha.shape[0] >= 2:
            beta[0] = 1.0
        return alpha, beta

    def with_parameters(self, alpha=None, beta=None, experts=None) -> "MixedLRMoEModel":
        """一部のパラメータを差し替えた新しいモデルを返します。"""
        return replace(
            self,
            alpha=self.alpha if alpha is None else alpha,
            beta=self.beta if beta is None else beta,
            experts=self.experts if experts is None else experts,
        )

    def with_design(self, design: RandomEffectDesign) -> "MixedLRMoEModel":
        """因子数を拡張した設計（未知の因子を含むデータ用）に差し替えたモデルを返します。"""
        if design.L != self.L:
            raise InvalidArgumentError(f"レベル数が一致しません: {design.L} != {self.L}")
        return self if design == self.design else replace(self, design=design)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "g": self.g,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "experts": [[expert.to_dict() for expert in row] for row in self.experts],
            "design": {"S": list(self.design.S)},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MixedLRMoEModel":
        design = RandomEffectDesign(S=tuple(data["design"]["S"]))
        g = len(data["alpha"])
        beta = np.asarray(data["beta"], dtype=float).reshape(g, design.L)
        return cls(
            alpha=np.asarray(data["alpha"], dtype=float),
            beta=beta,
            experts=tuple(tuple(expert_from_dict(e) for e in row) for row in data["experts"]),
            design=design,
        )


def log_gating(X: np.ndarray, W: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """観測ごとのゲーティング確率の対数 log π_ij（n×g）を計算します。

    線形予測子 α_j^T x_i + β_j^T w_i から最大値を引いて log-sum-exp で正規化します。
    """
    eta = X @ alpha.T
    if W.shape[1] > 0:
        eta = eta + W @ beta.T
    return eta - logsumexp(eta, axis=1, keepdims=True)


def gating_probs(x_i: Sequence[float], w_i: Sequence[float], model: MixedLRMoEModel) -> np.ndarray:
    """単一観測のゲーティング確率 π_j(x_i, w_i; α, β) を返します。

    Args:
        x_i: 長さ P の共変量
        w_i: 長さ L のランダム効果
        model: モデル

    Returns:
        np.ndarray: 長さ g の確率ベクトル

    Raises:
        InvalidArgumentError: 非有限値や長さの不一致がある場合
    """
    x = np.asarray(x_i, dtype=float).reshape(1, -1)
    w = np.asarray(w_i, dtype=float).reshape(1, -1)
    if x.shape[1] != model.P or w.shape[1] != model.L:
        raise InvalidArgumentError(f"x の長さは {model.P}、w の長さは {model.L} である必要があります")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
        raise InvalidArgumentError("ゲーティングの入力に非有限値が含まれています")
    return np.exp(log_gating(x, w, model.alpha, model.beta)[0])


def expert_log_density_matrix(Y: np.ndarray, model: MixedLRMoEModel) -> np.ndarray:
    """各観測・各クラスのエキスパート対数密度 Σ_d log f_jd(y_id)（n×g）を計算します。"""
    if Y.shape[1] != model.D:
        raise InvalidArgumentError(f"応答の次元 {Y.shape[1]} がエキスパートの次元 {model.D} と一致しません")
    columns = []
    for row in model.experts:
        total = np.zeros(Y.shape[0])
        for d, expert in enumerate(row):
            total = total + expert.logpdf(Y[:, d])
        columns.append(total)
    return np.column_stack(columns)


def log_joint_matrix(
    data: Dataset, model: MixedLRMoEModel, W: np.ndarray, log_f: Optional[np.ndarray] = None
) -> np.ndarray:
    """log π_ij + log f_j(y_i) の n×g 行列を返します。

    Args:
        data: データセット
        model: モデル
        W: n×L の観測ごとのランダム効果
        log_f: 事前計算済みのエキスパート対数密度（省略時は計算）
    """
    if log_f is None:
        log_f = expert_log_density_matrix(data.Y, model)
    with np.errstate(invalid="ignore"):
        return log_gating(data.X, W, model.alpha, model.beta) + log_f


def _report_zero_density(rows: np.ndarray, diagnostics: Optional[List[str]]) -> None:
    message = f"全クラスで密度0となる観測があります（{rows.size} 件、行: {rows[:10].tolist()}）"
    logger.warning(message)
    if diagnostics is not None:
        diagnostics.append(message)


def observation_loglik(
    data: Dataset, model: MixedLRMoEModel, w: RandomEffectsRealization, diagnostics: Optional[List[str]] = None
) -> np.ndarray:
    """観測ごとの対数尤度 log Σ_j π_j f_j(y_i) を返します。"""
    W = w.per_observation(data.factor_index)
    row_loglik = logsumexp(log_joint_matrix(data, model, W), axis=1)
    bad_rows = np.flatnonzero(row_loglik == -np.inf)
    if bad_rows.size:
        _report_zero_density(bad_rows, diagnostics)
    return row_loglik


def conditional_loglik(
    data: Dataset, model: MixedLRMoEModel, w: RandomEffectsRealization, diagnostics: Optional[List[str]] = None
) -> float:
    """ランダム効果 w を与えたときの対数尤度 log L̃ を計算します。

    Args:
        data: データセット
        model: モデル
        w: ランダム効果の実現値（L = 0 の場合は空）
        diagnostics: 診断メッセージの追記先（任意）

    Returns:
        float: 対数尤度。全クラスで密度0の観測がある場合は -inf
    """
    return float(np.sum(observation_loglik(data, model, w, diagnostics)))


def responsibilities_from_log_joint(
    log_joint: np.ndarray, diagnostics: Optional[List[str]] = None
) -> np.ndarray:
    """log π_ij f_ij の行列から責任度を計算します。全要素 -inf の行は一様分布とします。"""
    row_max = np.max(log_joint, axis=1, keepdims=True)
    degenerate = ~np.isfinite(row_max[:, 0])
    safe = np.where(degenerate[:, None], 0.0, log_joint - np.where(degenerate[:, None], 0.0, row_max))
    weights = np.exp(safe)
    z = weights / weights.sum(axis=1, keepdims=True)
    if np.any(degenerate):
        g = log_joint.shape[1]
        z[degenerate] = 1.0 / g
        rows = np.flatnonzero(degenerate)
        message = f"退化した責任度の行を一様分布に置き換えました（{rows.size} 件、行: {rows[:10].tolist()}）"
        logger.warning(message)
        if diagnostics is not None:
            diagnostics.append(message)
    return z


def latent_class_responsibilities_given_w(
    data: Dataset, model: MixedLRMoEModel, w: RandomEffectsRealization, diagnostics: Optional[List[str]] = None
) -> np.ndarray:
    """w を与えたときの潜在クラスの条件付き期待値 E[Z_ij | X, Y, w]（n×g）を返します。"""
    W = w.per_observation(data.factor_index)
    return responsibilities_from_log_joint(log_joint_matrix(data, model, W), diagnostics)
