#!/usr/bin/env python
"""
ワークフロー

ファイルを入出力とするデータ生成・推定・予測・評価の処理をまとめます。
CLI（main.py）と MCP ツール（lrmoe_tools.py）の両方から使用されます。
"""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .analytics import DEFAULT_COVERAGES, class_means, evaluate, ordered_lorenz, posterior_class_probs_batch, posterior_premiums
from .data_io import (
    FLOAT_FORMAT,
    ModelArchive,
    load_archive,
    load_dataset,
    save_archive,
    write_simulation,
)
from .ecm_fitter import FitConfig, fit
from .errors import DatasetFormatError, InvalidArgumentError, InvalidConfigurationError
from .simulation import SimSpec, simulate

logger = logging.getLogger(__name__)


def simulate_to_file(spec: SimSpec, out: str) -> Dict[str, Any]:
    """データを生成し、CSVと真値のサイドカーを書き出します。

    Returns:
        Dict[str, Any]: 出力ファイルと件数の要約
    """
    result = simulate(spec)
    sidecar = write_simulation(out, result, spec)
    counts = np.bincount(result.labels, minlength=result.model.g)
    return {"rows": result.dataset.n, "data": out, "truth": sidecar, "class_counts": counts.tolist()}


def _archive(model, post, table, report, config: FitConfig) -> ModelArchive:
    return ModelArchive(
        model=model,
        posterior=post,
        factors=table.factors,
        covariates=table.covariates,
        responses=table.responses,
        report=report,
        config=config.to_dict(),
    )


def fit_to_archive(data_path: str, config: FitConfig, out: str, init_archive: Optional[str] = None) -> ModelArchive:
    """CSVを読み込んで推定し、アーカイブを書き出します（収束しなかった場合も書き出します）。

    Args:
        data_path: 学習データのCSV
        config: 推定設定
        out: アーカイブの出力先
        init_archive: ウォームスタートに使うアーカイブ（任意）

    Returns:
        ModelArchive: 書き出したアーカイブ
    """
    init = None
    factors = None
    covariates = None
    if init_archive:
        previous = load_archive(init_archive)
        factors, covariates = previous.factors, previous.covariates
    table = load_dataset(data_path, factors=factors, covariates=covariates)
    if init_archive:
        init = (previous.model.with_design(table.dataset.design), previous.posterior)

    model, post, report = fit(table.dataset, config, init=init)
    archive = _archive(model, post, table, report, config)
    save_archive(out, archive)
    return archive


def fit_summary(archive: ModelArchive) -> Dict[str, Any]:
    """推定結果の要約（ELBOの推移、収束状況、パラメータ数、AIC）"""
    report = archive.report
    trace = report.elbo_trace
    return {
        "converged": report.converged,
        "reason": report.reason,
        "iterations": report.iterations,
        "initial_elbo": report.initial_elbo,
        "final_elbo": report.final_elbo,
        "elbo_first_last": [trace[0], trace[-1]] if trace else [],
        "n_params": report.n_params,
        "aic": report.aic,
        "class_masses": report.class_masses,
        "n_warnings": len(report.warnings),
    }


def _unseen_rows(archive: ModelArchive, factor_index: np.ndarray) -> np.ndarray:
    unseen = np.zeros(factor_index.shape[0], dtype=bool)
    for level, labels in enumerate(archive.factors.labels):
        unseen |= factor_index[:, level] >= len(labels)
    return unseen


def predict_to_file(archive_path: str, data_path: str, out: str, M: int = 1000, seed: int = 0) -> Dict[str, Any]:
    """行ごとの事後純保険料・潜在クラス確率・信用区間をCSVに書き出します。

    学習時に現れなかった因子は事前分布で代用し、その行数を要約に含めます。
    """
    archive = load_archive(archive_path)
    table = load_dataset(
        data_path, factors=archive.factors, covariates=archive.covariates, n_responses=archive.model.D
    )
    data = table.dataset
    model = archive.model.with_design(data.design)
    post = archive.posterior.extended(data.design)

    probs = posterior_class_probs_batch(data, model, post, M, seed)
    columns: Dict[str, Any] = {"row": np.arange(1, data.n + 1), "premium": probs @ class_means(model)}
    for j in range(model.g):
        columns[f"class_prob_{j + 1}"] = probs[:, j]
    for level in range(data.L):
        index = data.factor_index[:, level]
        mu = post.mu[level][index]
        sigma = post.sigma(level)[index]
        columns[f"f{level + 1}_mean"] = mu
        for coverage in DEFAULT_COVERAGES:
            z = float(stats.norm.ppf(0.5 * (1.0 + coverage)))
            tag = f"{coverage * 100:g}".replace(".", "_")
            columns[f"f{level + 1}_ci{tag}_lo"] = mu - z * sigma
            columns[f"f{level + 1}_ci{tag}_hi"] = mu + z * sigma
    unseen = _unseen_rows(archive, data.factor_index)
    columns["unseen_factor"] = unseen.astype(int)

    Path(out).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(columns).to_csv(out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"予測結果を書き出しました: {out}（{data.n} 行、未知の因子を含む行 {int(unseen.sum())}）")
    return {"rows": data.n, "output": out, "unseen_rows": int(unseen.sum())}


def _evaluation_defaults(archive: ModelArchive, seed: Optional[int], elbo_samples: Optional[int]):
    if seed is None:
        seed = int(archive.config.get("seed", archive.report.seed))
    if elbo_samples is None:
        elbo_samples = int(archive.report.elbo_samples or archive.config.get("M", 1000))
    if elbo_samples < 1:
        raise InvalidArgumentError(f"ELBO のサンプル数は1以上である必要があります: {elbo_samples}")
    return seed, elbo_samples


def evaluate_files(
    archive_path: str,
    data_path: str,
    M: int = 1000,
    seed: Optional[int] = None,
    loss_column: Optional[str] = None,
    lorenz_out: Optional[str] = None,
    elbo_samples: Optional[int] = None,
) -> Dict[str, Any]:
    """テストデータで ELBO・近似対数尤度・AIC を計算し、損失列があれば Lorenz 曲線と Gini 係数も求めます。

    seed と elbo_samples の既定値はアーカイブに記録された推定時のシードとサンプル数です。
    学習データを与えると ELBO は推定の最終ELBOと一致します。
    """
    archive = load_archive(archive_path)
    seed, elbo_samples = _evaluation_defaults(archive, seed, elbo_samples)
    separate_loss = loss_column is not None and loss_column not in archive.responses
    table = load_dataset(
        data_path,
        factors=archive.factors,
        covariates=archive.covariates,
        exclude=[loss_column] if separate_loss else [],
    )
    data = table.dataset
    scores = evaluate(archive.model, archive.posterior, data, M, seed, elbo_samples=elbo_samples).to_dict()
    scores["seed"] = seed
    scores["elbo_samples"] = elbo_samples
    unseen_rows = int(_unseen_rows(archive, data.factor_index).sum())
    scores["unseen_rows"] = unseen_rows

    if loss_column is not None:
        if separate_loss:
            if loss_column not in table.extra:
                raise DatasetFormatError(f"損失列 '{loss_column}' がデータにありません")
            losses = table.extra[loss_column]
        else:
            losses = data.Y[:, table.responses.index(loss_column)]
        model = archive.model.with_design(data.design)
        premiums = posterior_premiums(data, model, archive.posterior, M, seed)
        curve = ordered_lorenz(premiums, losses, seed=seed)
        scores["gini"] = curve.gini
        scores["gini_se"] = curve.gini_se
        if lorenz_out:
            Path(lorenz_out).parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame({"premium_share": curve.x, "loss_share": curve.y}).to_csv(
                lorenz_out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
            )
    return scores


def select_g(
    data_path: str,
    validation_path: str,
    g_values: Sequence[int],
    config: FitConfig,
    out_dir: Optional[str] = None,
    M: int = 1000,
    seed: Optional[int] = None,
    nested: bool = False,
) -> Dict[str, Any]:
    """候補のクラス数ごとに推定し、検証データの AIC が最小のクラス数を選びます。

    各候補は config の g だけを差し替えて推定し、検証データで evaluate した
    近似対数尤度の AIC を比べます（同値なら小さい g）。nested が真なら
    2番目以降の候補は直前の候補の推定結果をクラス分割で埋め込んで開始します。

    Args:
        data_path: 学習データのCSV
        validation_path: 検証データのCSV
        g_values: 候補のクラス数
        config: 推定設定（experts は全クラス共通のタグ）
        out_dir: 候補ごとのアーカイブ model_g<g>.json の出力先（任意）
        M: 評価のサンプル数
        seed: 評価の乱数シード（省略時は推定設定のシード）
        nested: 小さい g の結果から順に埋め込んで推定するかどうか

    Returns:
        Dict[str, Any]: 候補ごとの指標の表と選ばれたクラス数

    Raises:
        InvalidConfigurationError: 候補が空または1未満を含む場合
    """
    candidates = sorted({int(g) for g in g_values})
    if not candidates or candidates[0] < 1:
        raise InvalidConfigurationError(f"候補のクラス数は1以上の整数である必要があります: {list(g_values)}")
    if M < 1:
        raise InvalidArgumentError(f"サンプル数 M は1以上である必要があります: {M}")
    table = load_dataset(data_path)
    validation = load_dataset(validation_path, factors=table.factors, covariates=table.covariates)
    seed = config.seed if seed is None else seed

    rows = []
    previous = None
    for g in candidates:
        candidate_config = replace(config, g=g)
        init = previous if nested and previous is not None and previous[0].g < g else None
        model, post, report = fit(table.dataset, candidate_config, init=init)
        previous = (model, post)
        scores = evaluate(model, post, validation.dataset, M, seed, elbo_samples=candidate_config.M)
        row = {
            "g": g,
            "converged": report.converged,
            "final_elbo": report.final_elbo,
            "n_params": report.n_params,
            "train_aic": report.aic,
            "validation_elbo": scores.elbo,
            "validation_approx_loglik": scores.approx_loglik,
            "validation_aic": scores.aic,
        }
        if out_dir:
            path = str(Path(out_dir) / f"model_g{g}.json")
            save_archive(path, _archive(model, post, table, report, candidate_config))
            row["archive"] = path
        logger.info(f"g = {g}: 検証AIC={scores.aic:.4f}, 学習ELBO={report.final_elbo:.4f}")
        rows.append(row)

    best = min(rows, key=lambda row: (row["validation_aic"], row["g"]))
    logger.info(f"検証AICによりクラス数 g = {best['g']} を選択しました")
    return {"selected_g": best["g"], "criterion": "validation_aic", "candidates": rows}


def format_scores(scores: Dict[str, Any]) -> str:
    """評価結果をJSON文字列に整形します。"""
    return json.dumps(scores, ensure_ascii=False, indent=2, default=float)
