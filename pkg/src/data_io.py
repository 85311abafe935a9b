#!/usr/bin/env python
"""
入出力

表形式データセット（CSV）の読み書き、因子ラベルの辞書、
JSON形式の推定設定・データ生成仕様の読み込み、モデルアーカイブの保存・読み込みを提供します。

データセットの列:
    y または y1..yD: 応答
    f1..fL: 因子ラベル（文字列として扱い、出現順に番号付け）
    その他: 共変量（切片は自動で先頭に追加）
"""

import os
import re
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .ecm_fitter import FitConfig, FitReport
from .errors import ArchiveError, DatasetFormatError, InvalidArgumentError, InvalidConfigurationError
from .experts import expert_from_dict
from .mixed_lrmoe import Dataset, MixedLRMoEModel, RandomEffectDesign
from .simulation import SimSpec, SimulationResult, preset_spec
from .variational import VariationalPosterior

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
ARCHIVE_SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"

_FACTOR_COLUMN = re.compile(r"^f(\d+)$")
_RESPONSE_COLUMN = re.compile(r"^y(\d*)$")


def default_seed() -> int:
    """環境変数 LRMOE_DEFAULT_SEED の値（未設定なら0）を返します。"""
    value = os.environ.get("LRMOE_DEFAULT_SEED", "0")
    try:
        return int(value)
    except ValueError:
        raise InvalidConfigurationError(f"LRMOE_DEFAULT_SEED は整数である必要があります: {value!r}")


@dataclass
class FactorDictionary:
    """因子ラベルと内部の因子番号（0始まり）の対応表

    Attributes:
        labels: レベルごとのラベルのリスト（リスト内の位置が因子番号）
    """

    labels: List[List[str]] = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.labels)

    @property
    def design(self) -> RandomEffectDesign:
        return RandomEffectDesign(S=tuple(len(level) for level in self.labels))

    def encode(self, columns: Sequence[Sequence[str]]) -> Tuple["FactorDictionary", np.ndarray]:
        """ラベル列を因子番号に変換します。未知のラベルは末尾に追加した辞書を返します。

        Args:
            columns: レベルごとのラベル列

        Returns:
            Tuple[FactorDictionary, np.ndarray]: 拡張後の辞書と n×L の因子番号
        """
        if len(columns) != self.L:
            raise InvalidArgumentError(f"因子列の数 {len(columns)} が辞書のレベル数 {self.L} と一致しません")
        extended = []
        indices = []
        for known, column in zip(self.labels, columns):
            lookup = {label: k for k, label in enumerate(known)}
            labels = list(known)
            codes = np.empty(len(column), dtype=np.int64)
            for i, label in enumerate(column):
                if label not in lookup:
                    lookup[label] = len(labels)
                    labels.append(label)
                codes[i] = lookup[label]
            extended.append(labels)
            indices.append(codes)
        n = len(columns[0]) if columns else 0
        factor_index = np.column_stack(indices) if indices else np.zeros((n, 0), dtype=np.int64)
        return FactorDictionary(labels=extended), factor_index

    def to_dict(self) -> List[List[str]]:
        return [list(level) for level in self.labels]

    @classmethod
    def from_dict(cls, data: List[List[str]]) -> "FactorDictionary":
        return cls(labels=[[str(label) for label in level] for level in data])


@dataclass
class TabularData:
    """CSVから読み込んだデータセットと列情報

    Attributes:
        dataset: データセット
        factors: 因子ラベルの辞書（既存の辞書に未知のラベルを追加したもの）
        covariates: 共変量の列名（切片を除く）
        responses: 応答の列名
        extra: 共変量から除外した列の値
    """

    dataset: Dataset
    factors: FactorDictionary
    covariates: List[str]
    responses: List[str]
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def _classify_columns(
    columns: Sequence[str], exclude: Sequence[str], require_response: bool = True
) -> Tuple[List[str], List[str], List[str]]:
    responses = sorted((c for c in columns if _RESPONSE_COLUMN.match(c)), key=lambda c: int(c[1:] or 0))
    factors = sorted((c for c in columns if _FACTOR_COLUMN.match(c)), key=lambda c: int(c[1:]))
    covariates = [c for c in columns if c not in responses and c not in factors and c not in exclude]
    if not responses and require_response:
        raise DatasetFormatError("応答列（y または y1..yD）がありません")
    if "y" in responses and len(responses) > 1:
        raise DatasetFormatError("応答列 y と y1..yD は混在できません")
    expected = [f"f{k + 1}" for k in range(len(factors))]
    if factors != expected:
        raise DatasetFormatError(f"因子列は f1..fL の連番である必要があります: {factors}")
    return responses, factors, covariates


def load_dataset(
    path: str,
    factors: Optional[FactorDictionary] = None,
    covariates: Optional[Sequence[str]] = None,
    exclude: Sequence[str] = (),
    n_responses: Optional[int] = None,
) -> TabularData:
    """CSVファイルからデータセットを読み込みます。

    Args:
        path: CSVファイルのパス
        factors: 既存の因子辞書（予測・評価時に学習時の番号付けを引き継ぐ）
        covariates: 期待する共変量の列名（アーカイブと照合する場合）
        exclude: 共変量として扱わない列名（損失列など）
        n_responses: 応答列がない場合に0で埋める応答の次元数（予測用。省略時は応答列が必須）

    Returns:
        TabularData: データセットと列情報

    Raises:
        DatasetFormatError: 解析できない行や列構成の不備がある場合（最初の10行の行番号を含む）
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DatasetFormatError(f"データセットが空です: {path}")
    except pd.errors.ParserError as e:
        raise DatasetFormatError(f"データセットを解析できません: {path}: {str(e)}")

    frame.columns = [str(c).strip() for c in frame.columns]
    responses, factor_columns, covariate_columns = _classify_columns(
        list(frame.columns), exclude, require_response=n_responses is None
    )
    if covariates is not None:
        if list(covariates) != covariate_columns:
            raise DatasetFormatError(f"共変量の列 {covariate_columns} がモデルの共変量 {list(covariates)} と一致しません")
    if frame.empty:
        raise DatasetFormatError(f"データセットに行がありません: {path}")

    numeric_columns = responses + covariate_columns + [c for c in exclude if c in frame.columns]
    numeric = frame[numeric_columns].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    for column in factor_columns:
        bad |= frame[column].str.strip() == ""
    if bad.any():
        # ヘッダーを1行目とした行番号
        lines = (np.flatnonzero(bad.to_numpy()) + 2).tolist()
        raise DatasetFormatError(
            f"解析できない行が {len(lines)} 行あります（最初の10行: {lines[:10]}）", line_numbers=lines[:10]
        )

    n = len(frame)
    dictionary = factors if factors is not None else FactorDictionary(labels=[[] for _ in factor_columns])
    if dictionary.L != len(factor_columns):
        raise DatasetFormatError(f"因子列の数 {len(factor_columns)} がモデルのレベル数 {dictionary.L} と一致しません")
    dictionary, factor_index = dictionary.encode([frame[c].str.strip().tolist() for c in factor_columns])

    X = np.column_stack([np.ones(n)] + [numeric[c].to_numpy(dtype=float) for c in covariate_columns])
    if responses:
        Y = numeric[responses].to_numpy(dtype=float)
    else:
        Y = np.zeros((n, n_responses))
    dataset = Dataset(X=X, Y=Y, factor_index=factor_index, design=dictionary.design)
    extra = {c: numeric[c].to_numpy(dtype=float) for c in exclude if c in numeric.columns}
    logger.info(f"データセットを読み込みました: {path}（n={n}, P={dataset.P}, D={dataset.D}, S={dataset.design.S}）")
    return TabularData(dataset=dataset, factors=dictionary, covariates=covariate_columns, responses=responses, extra=extra)


def dataset_frame(
    dataset: Dataset,
    factors: Optional[FactorDictionary] = None,
    covariates: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """データセットを表形式（応答・共変量・因子ラベル）の DataFrame に変換します。"""
    columns: Dict[str, Any] = {}
    if dataset.D == 1:
        columns["y"] = dataset.Y[:, 0]
    else:
        for d in range(dataset.D):
            columns[f"y{d + 1}"] = dataset.Y[:, d]
    names = list(covariates) if covariates is not None else [f"x{k}" for k in range(1, dataset.P)]
    for k, name in enumerate(names, start=1):
        columns[name] = dataset.X[:, k]
    for level in range(dataset.L):
        codes = dataset.factor_index[:, level]
        if factors is not None:
            labels = np.asarray(factors.labels[level], dtype=object)
            columns[f"f{level + 1}"] = labels[codes]
        else:
            columns[f"f{level + 1}"] = (codes + 1).astype(str)
    return pd.DataFrame(columns)


def write_dataset(path: str, dataset: Dataset, factors: Optional[FactorDictionary] = None) -> None:
    """データセットをCSVに書き出します（因子ラベルは辞書がなければ 1 始まりの番号）。"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(dataset, factors).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_simulation(path: str, result: SimulationResult, spec: SimSpec) -> str:
    """生成データをCSVに、真値（ランダム効果・潜在クラス・パラメータ）をJSONのサイドカーに書き出します。

    Returns:
        str: サイドカーファイルのパス
    """
    write_dataset(path, result.dataset)
    sidecar = str(Path(path).with_suffix(".truth.json"))
    truth = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": int(spec.seed),
        "n": int(spec.n),
        "assignment": spec.assignment,
        "covariate_probs": list(spec.covariate_probs),
        "model": result.model.to_dict(),
        "w": {f"f{level + 1}": {str(s + 1): float(v) for s, v in enumerate(values)} for level, values in enumerate(result.w.w)},
        "labels": (np.asarray(result.labels) + 1).tolist(),
    }
    Path(sidecar).write_text(json.dumps(truth, indent=2) + "\n", encoding="utf-8")
    return sidecar


def _read_json(path: str, kind: str) -> Dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InvalidConfigurationError(f"{kind}ファイルが見つかりません: {path}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidConfigurationError(f"{path}: {e.lineno}行 {e.colno}列: JSONの構文エラー: {e.msg}")
    if not isinstance(data, dict):
        raise InvalidConfigurationError(f"{path}: {kind}はJSONオブジェクトである必要があります")
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise InvalidConfigurationError(f"{path}: 'schema_version' {version!r} には対応していません（対応: {CONFIG_SCHEMA_VERSION}）")
    return data


def fit_config_from_dict(data: Dict[str, Any], source: str = "config") -> FitConfig:
    """辞書から推定設定を作成し検証します。

    Raises:
        InvalidConfigurationError: 未知のキー・必須キーの欠落・不正な値がある場合（フィールド名を含む）
    """
    fields = {key: value for key, value in data.items() if key != "schema_version"}
    unknown = sorted(set(fields) - set(FitConfig.__dataclass_fields__))
    if unknown:
        raise InvalidConfigurationError(f"{source}: 未知のフィールドがあります: {unknown}")
    if "g" not in fields:
        raise InvalidConfigurationError(f"{source}: 必須フィールド 'g' がありません")
    if fields.get("seed") is None:
        fields["seed"] = default_seed()
    config = FitConfig(**fields)
    try:
        config.validate()
    except InvalidConfigurationError as e:
        raise InvalidConfigurationError(f"{source}: {str(e)}")
    except TypeError as e:
        raise InvalidConfigurationError(f"{source}: 'experts' の形式が不正です: {str(e)}")
    return config


def load_fit_config(path: str) -> FitConfig:
    """JSON形式の推定設定を読み込みます。"""
    return fit_config_from_dict(_read_json(path, "推定設定"), source=path)


_SPEC_KEYS = {"schema_version", "preset", "n", "seed", "S", "assignment", "covariate_probs", "alpha", "beta", "experts"}


def sim_spec_from_dict(data: Dict[str, Any], source: str = "spec") -> SimSpec:
    """辞書からデータ生成仕様を作成します。

    "preset" を指定した場合は既定の設計に n, seed, S, assignment を上書きし、
    指定しない場合は alpha, beta, experts, S から真のモデルを組み立てます。
    """
    unknown = sorted(set(data) - _SPEC_KEYS)
    if unknown:
        raise InvalidConfigurationError(f"{source}: 未知のフィールドがあります: {unknown}")
    seed = data.get("seed")
    seed = default_seed() if seed is None else seed
    try:
        if "preset" in data:
            spec = preset_spec(
                data["preset"], n=data.get("n"), seed=seed, S=data.get("S"), assignment=data.get("assignment")
            )
        else:
            for key in ("n", "alpha", "experts"):
                if key not in data:
                    raise InvalidConfigurationError(f"必須フィールド '{key}' がありません")
            design = RandomEffectDesign(S=tuple(data.get("S", ())))
            alpha = np.asarray(data["alpha"], dtype=float)
            beta = np.asarray(data.get("beta", np.zeros((alpha.shape[0], design.L))), dtype=float)
            experts = tuple(
                tuple(expert_from_dict(e) for e in (row if isinstance(row, list) else [row])) for row in data["experts"]
            )
            model = MixedLRMoEModel(alpha=alpha, beta=beta.reshape(alpha.shape[0], design.L), experts=experts, design=design)
            spec = SimSpec(
                n=data["n"],
                model=model,
                covariate_probs=tuple(data.get("covariate_probs", [0.5] * (alpha.shape[1] - 1))),
                assignment=data.get("assignment", "uniform"),
                seed=seed,
            )
        spec.validate()
    except (InvalidConfigurationError, InvalidArgumentError) as e:
        raise InvalidConfigurationError(f"{source}: {str(e)}")
    except (TypeError, ValueError) as e:
        raise InvalidConfigurationError(f"{source}: 値が不正です: {str(e)}")
    return spec


def load_sim_spec(path: str) -> SimSpec:
    """JSON形式のデータ生成仕様を読み込みます。"""
    return sim_spec_from_dict(_read_json(path, "データ生成仕様"), source=path)


@dataclass
class ModelArchive:
    """推定済みモデルのアーカイブ

    Attributes:
        model: 推定済みモデル
        posterior: 変分事後分布
        factors: 因子ラベルの辞書
        covariates: 共変量の列名
        responses: 応答の列名
        report: 推定レポート
        config: 推定設定（辞書）
        schema_version: アーカイブのスキーマバージョン
    """

    model: MixedLRMoEModel
    posterior: VariationalPosterior
    factors: FactorDictionary
    covariates: List[str]
    responses: List[str]
    report: FitReport
    config: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = ARCHIVE_SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "model": self.model.to_dict(),
            "posterior": self.posterior.to_dict(),
            "factors": self.factors.to_dict(),
            "covariates": list(self.covariates),
            "responses": list(self.responses),
            "report": self.report.to_dict(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelArchive":
        version = data.get("schema_version")
        if version != ARCHIVE_SCHEMA_VERSION:
            raise ArchiveError(f"アーカイブの schema_version {version!r} には対応していません（対応: {ARCHIVE_SCHEMA_VERSION}）")
        try:
            return cls(
                model=MixedLRMoEModel.from_dict(data["model"]),
                posterior=VariationalPosterior.from_dict(data["posterior"]),
                factors=FactorDictionary.from_dict(data["factors"]),
                covariates=list(data["covariates"]),
                responses=list(data["responses"]),
                report=FitReport.from_dict(data["report"]),
                config=dict(data.get("config", {})),
            )
        except KeyError as e:
            raise ArchiveError(f"アーカイブに必須項目 {str(e)} がありません")
        except (InvalidArgumentError, InvalidConfigurationError, TypeError) as e:
            raise ArchiveError(f"アーカイブの内容が不正です: {str(e)}")


def save_archive(path: str, archive: ModelArchive) -> None:
    """アーカイブをJSONで保存します（浮動小数点数は往復で同一の値になる表現）。"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(archive.to_dict(), indent=2) + "\n", encoding="utf-8")
    logger.info(f"アーカイブを保存しました: {path}")


def load_archive(path: str) -> ModelArchive:
    """JSONのアーカイブを読み込みます。

    Raises:
        ArchiveError: ファイルが存在しない・壊れている・スキーマが非対応の場合
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ArchiveError(f"アーカイブが見つかりません: {path}")
    except json.JSONDecodeError as e:
        raise ArchiveError(f"{path}: {e.lineno}行 {e.colno}列: アーカイブのJSONが壊れています: {e.msg}")
    if not isinstance(data, dict):
        raise ArchiveError(f"{path}: アーカイブはJSONオブジェクトである必要があります")
    return ModelArchive.from_dict(data)
