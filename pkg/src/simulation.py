#!/usr/bin/env python
"""
データ生成

既知の Mixed LRMoE モデルから合成データセットを生成します。
シミュレーション用の既定の設計（1レベル・2レベルのランダム効果、料率算定用ポートフォリオ）も提供します。
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidConfigurationError
from .experts import GammaExpert, ZILogNormalExpert
from .mixed_lrmoe import (
    Dataset,
    MixedLRMoEModel,
    RandomEffectDesign,
    RandomEffectsRealization,
    log_gating,
)

logger = logging.getLogger(__name__)

ASSIGNMENT_RULES = ("uniform", "balanced")


@dataclass(frozen=True)
class SimSpec:
    """データ生成の仕様

    Attributes:
        n: 観測数
        model: 真のモデル（model.design がランダム効果の設計）
        covariate_probs: 切片以外の各共変量を Bernoulli(p) で生成する確率
        assignment: 因子の割り当て方（"uniform": 一様ランダム、"balanced": 各因子の観測数を均等化）
        seed: 乱数シード
    """

    n: int
    model: MixedLRMoEModel
    covariate_probs: Tuple[float, ...] = (0.5,)
    assignment: str = "uniform"
    seed: int = 0

    def validate(self) -> None:
        """仕様を検証します。

        Raises:
            InvalidConfigurationError: 不正なフィールドがある場合
        """
        if isinstance(self.n, bool) or not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise InvalidConfigurationError(f"'n' は1以上の整数である必要があります: {self.n!r}")
        if self.model.P != 1 + len(self.covariate_probs):
            raise InvalidConfigurationError(
                f"モデルの P = {self.model.P} が 1 + 共変量数 {len(self.covariate_probs)} と一致しません"
            )
        if any(not 0.0 <= p <= 1.0 for p in self.covariate_probs):
            raise InvalidConfigurationError(f"'covariate_probs' は [0, 1] の範囲である必要があります: {self.covariate_probs}")
        if self.assignment not in ASSIGNMENT_RULES:
            raise InvalidConfigurationError(
                f"'assignment' は {', '.join(ASSIGNMENT_RULES)} のいずれかである必要があります: {self.assignment!r}"
            )
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise InvalidConfigurationError(f"'seed' は0以上の整数である必要があります: {self.seed!r}")


@dataclass(frozen=True)
class SimulationResult:
    """生成結果と真値

    Attributes:
        dataset: 生成したデータセット
        w: 真のランダム効果
        labels: 各観測の潜在クラス（0始まり）
        model: 真のモデル
    """

    dataset: Dataset
    w: RandomEffectsRealization
    labels: np.ndarray
    model: MixedLRMoEModel


def _assign_factors(rng: np.random.Generator, n: int, size: int, rule: str) -> np.ndarray:
    if rule == "balanced":
        return rng.permutation(np.arange(n) % size)
    return rng.integers(0, size, size=n)


def simulate(spec: SimSpec) -> SimulationResult:
    """仕様に従って合成データを生成します。

    因子ごとに w ~ N(0, 1) を生成し、観測に因子を割り当て、
    ゲーティング確率から潜在クラスを、エキスパートから応答を生成します。
    乱数は SeedSequence から用途別の独立なストリームとして派生させます。

    Args:
        spec: データ生成の仕様

    Returns:
        SimulationResult: データセット・真のランダム効果・潜在クラス
    """
    spec.validate()
    model = spec.model
    n = spec.n
    covariate_rng, assignment_rng, effect_rng, class_rng, response_rng = (
        np.random.default_rng(child) for child in np.random.SeedSequence(spec.seed).spawn(5)
    )

    covariates = [(covariate_rng.random(n) < p).astype(float) for p in spec.covariate_probs]
    X = np.column_stack([np.ones(n)] + covariates)

    design = model.design
    factor_index = np.zeros((n, design.L), dtype=np.int64)
    for level, size in enumerate(design.S):
        factor_index[:, level] = _assign_factors(assignment_rng, n, size, spec.assignment)
    w = RandomEffectsRealization(w=tuple(effect_rng.standard_normal(size) for size in design.S))

    probs = np.exp(log_gating(X, w.per_observation(factor_index), model.alpha, model.beta))
    uniforms = class_rng.random(n)
    labels = np.minimum((uniforms[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), model.g - 1)

    Y = np.zeros((n, model.D))
    for j, row in enumerate(model.experts):
        rows = np.flatnonzero(labels == j)
        for d, expert in enumerate(row):
            Y[rows, d] = expert.sample(response_rng, rows.size)

    dataset = Dataset(X=X, Y=Y, factor_index=factor_index, design=design)
    logger.info(f"データ生成: n={n}, g={model.g}, S={design.S}, クラス別件数={np.bincount(labels, minlength=model.g).tolist()}")
    return SimulationResult(dataset=dataset, w=w, labels=labels, model=model)


def _design_one(S: Optional[Sequence[int]]) -> MixedLRMoEModel:
    design = RandomEffectDesign(S=tuple(S or (200,)))
    alpha = np.array([[0.5, -1.0], [0.0, 0.0]])
    beta = np.array([[1.0], [0.0]])
    experts = ((GammaExpert(shape=2.0, scale=1.0),), (GammaExpert(shape=5.0, scale=10.0),))
    return MixedLRMoEModel(alpha=alpha, beta=beta, experts=experts, design=design)


def _design_two(S: Optional[Sequence[int]]) -> MixedLRMoEModel:
    design = RandomEffectDesign(S=tuple(S or (200, 2000)))
    alpha = np.array([[0.5, -1.0], [-0.3, 0.8], [0.0, 0.0]])
    beta = np.array([[1.0, 1.0], [-0.8, 0.6], [0.0, 0.0]])
    experts = (
        (GammaExpert(shape=2.0, scale=1.0),),
        (GammaExpert(shape=5.0, scale=4.0),),
        (GammaExpert(shape=3.0, scale=30.0),),
    )
    return MixedLRMoEModel(alpha=alpha, beta=beta, experts=experts, design=design)


def _ratemaking(S: Optional[Sequence[int]], n: int) -> MixedLRMoEModel:
    # 1契約者あたり平均6年分の観測
    design = RandomEffectDesign(S=tuple(S or (max(n // 6, 1),)))
    alpha = np.array([[-1.0, 0.5], [0.0, 0.0]])
    beta = np.array([[1.0], [0.0]])
    experts = (
        (ZILogNormalExpert(zeroprob=0.6, meanlog=8.0, sdlog=1.0),),
        (ZILogNormalExpert(zeroprob=0.97, meanlog=7.0, sdlog=1.0),),
    )
    return MixedLRMoEModel(alpha=alpha, beta=beta, experts=experts, design=design)


PRESETS: Dict[str, Dict[str, Any]] = {
    "design_one": {"n": 50000, "assignment": "uniform"},
    "design_two": {"n": 50000, "assignment": "uniform"},
    "ratemaking": {"n": 30000, "assignment": "balanced"},
}


def preset_spec(
    name: str,
    n: Optional[int] = None,
    seed: int = 0,
    S: Optional[Sequence[int]] = None,
    assignment: Optional[str] = None,
) -> SimSpec:
    """既定の設計からデータ生成の仕様を作成します。

    Args:
        name: "design_one"（1レベル・g=2）、"design_two"（2レベル・g=3）、"ratemaking"（ゼロ過剰対数正規・g=2）
        n: 観測数（省略時は設計の既定値）
        seed: 乱数シード
        S: 各レベルの因子数の上書き
        assignment: 因子の割り当て方の上書き

    Raises:
        InvalidConfigurationError: 未知の設計名の場合
    """
    if name not in PRESETS:
        raise InvalidConfigurationError(f"不明な設計名です: '{name}'（利用可能: {', '.join(PRESETS)}）")
    defaults = PRESETS[name]
    n = int(n if n is not None else defaults["n"])
    if name == "design_one":
        model = _design_one(S)
    elif name == "design_two":
        model = _design_two(S)
    else:
        model = _ratemaking(S, n)
    return SimSpec(n=n, model=model, assignment=assignment or defaults["assignment"], seed=seed)
