#!/usr/bin/env python
"""
エキスパート関数

Mixed LRMoE の各潜在クラス・各次元に割り当てる応答分布（エキスパート関数）を提供します。
エキスパートは共変量を含まない分布で、Gamma / LogNormal / ゼロ過剰 LogNormal を実装しています。
新しい分布族は ExpertFamily を継承し EXPERT_FAMILIES に登録することで追加できます。
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, asdict
from typing import Dict, Any, Type

import numpy as np
from scipy import special, stats

from .errors import InvalidArgumentError, InvalidConfigurationError

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)
_MIN_SDLOG = 1e-6
_MAX_GAMMA_SHAPE = 1e8


class ExpertFamily(ABC):
    """エキスパート関数の基底クラス

    サブクラスはパラメータ領域の検証、対数密度、平均、乱数生成、
    および制約なしパラメータへの変換を実装します。

    Attributes:
        name: 分布族のタグ名
        n_params: 自由パラメータ数
        zero_inflated: y = 0 に質点を持つかどうか
    """

    name: str = ""
    n_params: int = 0
    zero_inflated: bool = False

    @abstractmethod
    def logpdf(self, y: np.ndarray) -> np.ndarray:
        """対数密度をベクトル化して計算します。台の外では -inf を返します。

        Args:
            y: 応答値の配列

        Returns:
            np.ndarray: 対数密度
        """

    @abstractmethod
    def cdf(self, y: np.ndarray) -> np.ndarray:
        """累積分布関数を計算します。"""

    @abstractmethod
    def mean(self) -> float:
        """分布の平均を返します。"""

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """乱数を生成します。"""

    @abstractmethod
    def to_unconstrained(self) -> np.ndarray:
        """制約なしパラメータ（正値は log、確率は logit）に変換します。"""

    @classmethod
    @abstractmethod
    def from_unconstrained(cls, theta: np.ndarray) -> "ExpertFamily":
        """制約なしパラメータから分布を構築します。"""

    @classmethod
    @abstractmethod
    def from_moments(cls, y: np.ndarray) -> "ExpertFamily":
        """クラスタ内の応答からモーメント法で初期パラメータを求めます（CMM初期化用）。"""

    def params(self) -> Dict[str, float]:
        """パラメータを辞書で返します。"""
        return {key: float(value) for key, value in asdict(self).items()}

    def to_dict(self) -> Dict[str, Any]:
        """シリアライズ用の辞書に変換します。"""
        return {"family": self.name, **self.params()}

    def weighted_loglik(self, y: np.ndarray, weights: np.ndarray) -> float:
        """重み付き対数尤度 Σ w_i log f(y_i) を計算します（重み0の点は無視）。"""
        y = np.asarray(y, dtype=float)
        weights = np.asarray(weights, dtype=float)
        active = weights > 0
        if not np.any(active):
            return 0.0
        return float(np.sum(weights[active] * self.logpdf(y[active])))

    @abstractmethod
    def fit_weighted(self, y: np.ndarray, weights: np.ndarray) -> "ExpertFamily":
        """重み付き最尤推定を行います。

        Args:
            y: 応答値
            weights: 各観測の重み（責任度）

        Returns:
            ExpertFamily: 推定後の分布（情報がない場合は自分自身）
        """

    def jittered(self, offset: float) -> "ExpertFamily":
        """制約なしパラメータの各成分に offset を加えた分布を返します。

        クラスを分割して埋め込むとき、複製した2つのエキスパートを ±offset で
        ずらして対称性を崩すために使います。
        """
        theta = np.asarray(self.to_unconstrained(), dtype=float)
        return type(self).from_unconstrained(theta + offset)


def _positive_part(y: np.ndarray, weights: np.ndarray):
    positive = (weights > 0) & (y > 0)
    return y[positive], weights[positive]


def _lognormal_logpdf(y: np.ndarray, meanlog: float, sdlog: float) -> np.ndarray:
    out = np.full(y.shape, -np.inf)
    positive = y > 0
    log_y = np.log(y[positive])
    out[positive] = -log_y - np.log(sdlog) - 0.5 * _LOG_2PI - 0.5 * ((log_y - meanlog) / sdlog) ** 2
    return out


def _lognormal_moments(y: np.ndarray):
    mean = float(np.mean(y))
    var = float(np.var(y))
    if var <= 0.0:
        var = (1e-3 * mean) ** 2
    sdlog2 = np.log1p(var / mean**2)
    return np.log(mean) - 0.5 * sdlog2, float(np.sqrt(sdlog2))


def _weighted_lognormal(y: np.ndarray, weights: np.ndarray):
    total = weights.sum()
    log_y = np.log(y)
    meanlog = float(np.sum(weights * log_y) / total)
    varlog = float(np.sum(weights * (log_y - meanlog) ** 2) / total)
    return meanlog, max(float(np.sqrt(varlog)), _MIN_SDLOG)


@dataclass(frozen=True)
class GammaExpert(ExpertFamily):
    """Gamma分布エキスパート（shape k > 0, scale θ > 0）"""

    shape: float
    scale: float

    name = "gamma"
    n_params = 2

    def __post_init__(self):
        if not (np.isfinite(self.shape) and self.shape > 0):
            raise InvalidArgumentError(f"Gammaのshapeは正の有限値である必要があります: {self.shape}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError(f"Gammaのscaleは正の有限値である必要があります: {self.scale}")

    def logpdf(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.full(y.shape, -np.inf)
        positive = y > 0
        y_pos = y[positive]
        out[positive] = (
            (self.shape - 1.0) * np.log(y_pos)
            - y_pos / self.scale
            - special.gammaln(self.shape)
            - self.shape * np.log(self.scale)
        )
        return out

    def cdf(self, y: np.ndarray) -> np.ndarray:
        return stats.gamma.cdf(np.asarray(y, dtype=float), a=self.shape, scale=self.scale)

    def mean(self) -> float:
        return float(self.shape * self.scale)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size=size)

    def to_unconstrained(self) -> np.ndarray:
        return np.array([np.log(self.shape), np.log(self.scale)])

    @classmethod
    def from_unconstrained(cls, theta: np.ndarray) -> "GammaExpert":
        return cls(shape=float(np.exp(theta[0])), scale=float(np.exp(theta[1])))

    @classmethod
    def from_moments(cls, y: np.ndarray) -> "GammaExpert":
        y = np.asarray(y, dtype=float)
        y = y[y > 0]
        if y.size == 0:
            raise InvalidConfigurationError("Gammaエキスパートの初期化に正の応答がありません")
        mean = float(np.mean(y))
        var = float(np.var(y))
        if var <= 0.0:
            var = (1e-3 * mean) ** 2
        return cls(shape=mean**2 / var, scale=var / mean)

    def fit_weighted(self, y: np.ndarray, weights: np.ndarray) -> "GammaExpert":
        """shapeのプロファイル尤度に対するNewton法で重み付き最尤推定を行います。

        重み付き十分統計量 ȳ = Σw y / Σw, log ȳ − Σw log y / Σw = s から
        log k − ψ(k) = s を log k 上の Newton 法で解き、θ = ȳ / k とします。
        """
        y_pos, w_pos = _positive_part(np.asarray(y, dtype=float), np.asarray(weights, dtype=float))
        total = w_pos.sum()
        if total <= 0:
            return self

        y_bar = float(np.sum(w_pos * y_pos) / total)
        log_bar = float(np.sum(w_pos * np.log(y_pos)) / total)
        s = np.log(y_bar) - log_bar
        if s <= 1e-14:
            # 全点が同一値: shape は発散する
            return GammaExpert(shape=_MAX_GAMMA_SHAPE, scale=y_bar / _MAX_GAMMA_SHAPE)

        # Minkaの近似を初期値とする
        shape = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
        for _ in range(100):
            f = np.log(shape) - special.digamma(shape) - s
            f_prime = 1.0 / shape - special.polygamma(1, shape)
            new_shape = float(np.exp(np.log(shape) - f / (shape * f_prime)))
            converged = abs(new_shape - shape) <= 1e-13 * shape
            shape = min(new_shape, _MAX_GAMMA_SHAPE)
            if converged:
                break
        return GammaExpert(shape=shape, scale=y_bar / shape)


@dataclass(frozen=True)
class LogNormalExpert(ExpertFamily):
    """対数正規分布エキスパート（meanlog m, sdlog s > 0）"""

    meanlog: float
    sdlog: float

    name = "lognormal"
    n_params = 2

    def __post_init__(self):
        if not np.isfinite(self.meanlog):
            raise InvalidArgumentError(f"LogNormalのmeanlogは有限値である必要があります: {self.meanlog}")
        if not (np.isfinite(self.sdlog) and self.sdlog > 0):
            raise InvalidArgumentError(f"LogNormalのsdlogは正の有限値である必要があります: {self.sdlog}")

    def logpdf(self, y: np.ndarray) -> np.ndarray:
        return _lognormal_logpdf(np.asarray(y, dtype=float), self.meanlog, self.sdlog)

    def cdf(self, y: np.ndarray) -> np.ndarray:
        return stats.lognorm.cdf(np.asarray(y, dtype=float), s=self.sdlog, scale=np.exp(self.meanlog))

    def mean(self) -> float:
        return float(np.exp(self.meanlog + 0.5 * self.sdlog**2))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.lognormal(self.meanlog, self.sdlog, size=size)

    def to_unconstrained(self) -> np.ndarray:
        return np.array([self.meanlog, np.log(self.sdlog)])

    @classmethod
    def from_unconstrained(cls, theta: np.ndarray) -> "LogNormalExpert":
        return cls(meanlog=float(theta[0]), sdlog=float(np.exp(theta[1])))

    @classmethod
    def from_moments(cls, y: np.ndarray) -> "LogNormalExpert":
        y = np.asarray(y, dtype=float)
        y = y[y > 0]
        if y.size == 0:
            raise InvalidConfigurationError("LogNormalエキスパートの初期化に正の応答がありません")
        meanlog, sdlog = _lognormal_moments(y)
        return cls(meanlog=meanlog, sdlog=sdlog)

    def fit_weighted(self, y: np.ndarray, weights: np.ndarray) -> "LogNormalExpert":
        """log y の重み付き平均・分散による閉形式の最尤推定"""
        y_pos, w_pos = _positive_part(np.asarray(y, dtype=float), np.asarray(weights, dtype=float))
        if w_pos.sum() <= 0:
            return self
        meanlog, sdlog = _weighted_lognormal(y_pos, w_pos)
        return LogNormalExpert(meanlog=meanlog, sdlog=sdlog)


@dataclass(frozen=True)
class ZILogNormalExpert(ExpertFamily):
    """ゼロ過剰対数正規分布エキスパート（zeroprob δ ∈ [0,1], meanlog m, sdlog s > 0）

    y = 0 に確率 δ の質点を持ち、y > 0 では (1 − δ) × 対数正規密度となります
    （ルベーグ測度＋原点の点測度に関する密度）。
    """

    zeroprob: float
    meanlog: float
    sdlog: float

    name = "zilognormal"
    zero_inflated = True
    n_params = 3

    def __post_init__(self):
        if not (np.isfinite(self.zeroprob) and 0.0 <= self.zeroprob <= 1.0):
            raise InvalidArgumentError(f"ZILogNormalのzeroprobは[0, 1]の範囲である必要があります: {self.zeroprob}")
        if not np.isfinite(self.meanlog):
            raise InvalidArgumentError(f"ZILogNormalのmeanlogは有限値である必要があります: {self.meanlog}")
        if not (np.isfinite(self.sdlog) and self.sdlog > 0):
            raise InvalidArgumentError(f"ZILogNormalのsdlogは正の有限値である必要があります: {self.sdlog}")

    def logpdf(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            log_zero = np.log(self.zeroprob)
            log_positive = np.log1p(-self.zeroprob)
        out = _lognormal_logpdf(y, self.meanlog, self.sdlog) + log_positive
        out[y == 0] = log_zero
        out[y < 0] = -np.inf
        return out

    def cdf(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        positive = stats.lognorm.cdf(y, s=self.sdlog, scale=np.exp(self.meanlog))
        return np.where(y < 0, 0.0, self.zeroprob + (1.0 - self.zeroprob) * positive)

    def mean(self) -> float:
        return float((1.0 - self.zeroprob) * np.exp(self.meanlog + 0.5 * self.sdlog**2))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        is_zero = rng.random(size) < self.zeroprob
        values = rng.lognormal(self.meanlog, self.sdlog, size=size)
        values[is_zero] = 0.0
        return values

    def to_unconstrained(self) -> np.ndarray:
        zeroprob = np.clip(self.zeroprob, 1e-12, 1.0 - 1e-12)
        return np.array([special.logit(zeroprob), self.meanlog, np.log(self.sdlog)])

    @classmethod
    def from_unconstrained(cls, theta: np.ndarray) -> "ZILogNormalExpert":
        return cls(zeroprob=float(special.expit(theta[0])), meanlog=float(theta[1]), sdlog=float(np.exp(theta[2])))

    @classmethod
    def from_moments(cls, y: np.ndarray) -> "ZILogNormalExpert":
        y = np.asarray(y, dtype=float)
        if y.size == 0:
            raise InvalidConfigurationError("ZILogNormalエキスパートの初期化に応答がありません")
        zeroprob = float(np.mean(y == 0))
        positive = y[y > 0]
        if positive.size == 0:
            return cls(zeroprob=zeroprob, meanlog=0.0, sdlog=1.0)
        meanlog, sdlog = _lognormal_moments(positive)
        return cls(zeroprob=zeroprob, meanlog=meanlog, sdlog=sdlog)

    def fit_weighted(self, y: np.ndarray, weights: np.ndarray) -> "ZILogNormalExpert":
        """δ は重み付きゼロ割合、正の部分は対数正規の閉形式で推定します。"""
        y = np.asarray(y, dtype=float)
        weights = np.asarray(weights, dtype=float)
        support = (weights > 0) & (y >= 0)
        total = weights[support].sum()
        if total <= 0:
            return self
        zeroprob = float(np.sum(weights[support & (y == 0)]) / total)
        y_pos, w_pos = _positive_part(y, weights)
        if w_pos.sum() <= 0:
            return ZILogNormalExpert(zeroprob=1.0, meanlog=self.meanlog, sdlog=self.sdlog)
        meanlog, sdlog = _weighted_lognormal(y_pos, w_pos)
        return ZILogNormalExpert(zeroprob=min(zeroprob, 1.0), meanlog=meanlog, sdlog=sdlog)


EXPERT_FAMILIES: Dict[str, Type[ExpertFamily]] = {
    GammaExpert.name: GammaExpert,
    LogNormalExpert.name: LogNormalExpert,
    ZILogNormalExpert.name: ZILogNormalExpert,
}


def get_family(name: str) -> Type[ExpertFamily]:
    """タグ名から分布族クラスを取得します。

    Raises:
        InvalidConfigurationError: 未登録の分布族の場合
    """
    key = str(name).lower()
    if key not in EXPERT_FAMILIES:
        raise InvalidConfigurationError(
            f"不明なエキスパート分布族です: '{name}'（利用可能: {', '.join(sorted(EXPERT_FAMILIES))}）"
        )
    return EXPERT_FAMILIES[key]


def expert_from_dict(data: Dict[str, Any]) -> ExpertFamily:
    """辞書からエキスパートを復元します。

    Args:
        data: {"family": タグ名, パラメータ...} 形式の辞書

    Returns:
        ExpertFamily: 復元されたエキスパート
    """
    if "family" not in data:
        raise InvalidConfigurationError(f"エキスパート定義に 'family' がありません: {data}")
    family = get_family(data["family"])
    params = {key: value for key, value in data.items() if key != "family"}
    try:
        return family(**{key: float(value) for key, value in params.items()})
    except TypeError as e:
        raise InvalidConfigurationError(f"エキスパート '{data['family']}' のパラメータが不正です: {str(e)}")


def expert_logpdf(family: ExpertFamily, y: float) -> float:
    """単一の応答値に対する対数密度を返します。

    台の外の値には -inf を返し、警告をログに記録します。

    Args:
        family: エキスパート
        y: 応答値

    Returns:
        float: 対数密度
    """
    if not np.isfinite(y):
        raise InvalidArgumentError(f"応答値が有限ではありません: {y}")
    value = float(family.logpdf(np.array([y], dtype=float))[0])
    if value == -np.inf:
        logger.warning(f"応答値 {y} は {family.name} エキスパートの台の外、または密度0です")
    return value


def expert_mean(family: ExpertFamily) -> float:
    """エキスパートの平均を返します。"""
    return family.mean()
