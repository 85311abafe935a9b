#!/usr/bin/env python
"""
Mixed LRMoE ツール

データ生成・推定・予測・評価・クラス数の選択を MCP ツールとして提供します。
"""

from typing import Dict, Any

from .data_io import default_seed, fit_config_from_dict, load_fit_config, load_sim_spec, sim_spec_from_dict
from .mcp_server import json_result, text_result
from .workflows import evaluate_files, fit_summary, fit_to_archive, predict_to_file, select_g, simulate_to_file


def register_lrmoe_tools(server) -> None:
    """Mixed LRMoE ツールをMCPサーバーに登録します。

    Args:
        server: MCPサーバーインスタンス
    """

    # データ生成ツール
    server.register_tool(
        name="simulate_dataset",
        description="Mixed LRMoE モデルから合成データを生成し、CSVと真値のJSONを書き出します",
        input_schema={
            "type": "object",
            "properties": {
                "spec": {
                    "type": "object",
                    "description": "データ生成仕様（例: {'preset': 'design_one', 'n': 1000, 'seed': 7}）",
                },
                "spec_path": {"type": "string", "description": "データ生成仕様のJSONファイル（spec の代わり）"},
                "output_path": {"type": "string", "description": "出力CSVのパス"},
            },
            "required": ["output_path"],
        },
        handler=simulate_dataset,
    )

    # 推定ツール
    server.register_tool(
        name="fit_model",
        description="CSVのデータセットから Mixed LRMoE モデルを推定し、アーカイブを書き出します",
        input_schema={
            "type": "object",
            "properties": {
                "data_path": {"type": "string", "description": "学習データのCSV"},
                "config": {"type": "object", "description": "推定設定（例: {'g': 2, 'experts': 'gamma'}）"},
                "config_path": {"type": "string", "description": "推定設定のJSONファイル（config の代わり）"},
                "archive_path": {"type": "string", "description": "出力アーカイブのパス"},
                "init_archive": {"type": "string", "description": "ウォームスタートに使うアーカイブ（省略可）"},
            },
            "required": ["data_path", "archive_path"],
        },
        handler=fit_model,
    )

    # 予測ツール
    server.register_tool(
        name="predict_premiums",
        description="アーカイブを使って行ごとの事後純保険料・潜在クラス確率・信用区間をCSVに書き出します",
        input_schema={
            "type": "object",
            "properties": {
                "archive_path": {"type": "string", "description": "モデルアーカイブ"},
                "data_path": {"type": "string", "description": "予測対象データのCSV"},
                "output_path": {"type": "string", "description": "出力CSVのパス"},
                "samples": {"type": "integer", "description": "モンテカルロサンプル数（既定: 1000）"},
                "seed": {"type": "integer", "description": "乱数シード"},
            },
            "required": ["archive_path", "data_path", "output_path"],
        },
        handler=predict_premiums,
    )

    # 評価ツール
    server.register_tool(
        name="evaluate_model",
        description="テストデータで ELBO・近似対数尤度・AIC を計算し、損失列があれば Gini 係数も計算します",
        input_schema={
            "type": "object",
            "properties": {
                "archive_path": {"type": "string", "description": "モデルアーカイブ"},
                "data_path": {"type": "string", "description": "テストデータのCSV"},
                "samples": {"type": "integer", "description": "モンテカルロサンプル数（既定: 1000）"},
                "seed": {"type": "integer", "description": "乱数シード（省略時は推定時のシード）"},
                "elbo_samples": {"type": "integer", "description": "ELBO のサンプル数（省略時は推定時の M）"},
                "loss_column": {"type": "string", "description": "Lorenz 曲線に使う損失列（例: 'y'）"},
            },
            "required": ["archive_path", "data_path"],
        },
        handler=evaluate_model,
    )

    # クラス数選択ツール
    server.register_tool(
        name="select_classes",
        description="候補のクラス数ごとに推定し、検証データの AIC が最小のクラス数を選びます",
        input_schema={
            "type": "object",
            "properties": {
                "data_path": {"type": "string", "description": "学習データのCSV"},
                "validation_path": {"type": "string", "description": "検証データのCSV"},
                "g_values": {"type": "array", "items": {"type": "integer"}, "description": "候補のクラス数"},
                "config": {"type": "object", "description": "推定設定（g は候補ごとに置き換え）"},
                "config_path": {"type": "string", "description": "推定設定のJSONファイル（config の代わり）"},
                "output_dir": {"type": "string", "description": "候補ごとのアーカイブの出力先（省略可）"},
                "samples": {"type": "integer", "description": "評価のモンテカルロサンプル数（既定: 1000）"},
                "seed": {"type": "integer", "description": "評価の乱数シード"},
                "nested": {"type": "boolean", "description": "小さい g の結果を埋め込んで推定するかどうか"},
            },
            "required": ["data_path", "validation_path", "g_values"],
        },
        handler=select_classes,
    )

    # 設定検証ツール
    server.register_tool(
        name="validate_fit_config",
        description="推定設定を検証します",
        input_schema={
            "type": "object",
            "properties": {"config": {"type": "object", "description": "検証する推定設定"}},
            "required": ["config"],
        },
        handler=validate_fit_config,
    )


def simulate_dataset(params: Dict[str, Any]) -> Dict[str, Any]:
    """合成データを生成します。

    Args:
        params (Dict[str, Any]): パラメータ辞書
            - spec (dict, optional): データ生成仕様
            - spec_path (str, optional): データ生成仕様のJSONファイル
            - output_path (str): 出力CSVのパス

    Returns:
        Dict[str, Any]: 実行結果
    """
    try:
        output_path = params.get("output_path")
        if not output_path:
            raise ValueError("output_pathパラメータが必要です")
        if params.get("spec") is not None:
            spec = sim_spec_from_dict(params["spec"])
        elif params.get("spec_path"):
            spec = load_sim_spec(params["spec_path"])
        else:
            raise ValueError("specまたはspec_pathパラメータが必要です")

        summary = simulate_to_file(spec, output_path)
        return text_result(
            f"データを生成しました。\n"
            f"出力ファイル: {summary['data']}\n"
            f"真値ファイル: {summary['truth']}\n"
            f"行数: {summary['rows']}\n"
            f"クラス別件数: {summary['class_counts']}"
        )

    except Exception as e:
        return text_result(f"データ生成エラー: {str(e)}", is_error=True)


def fit_model(params: Dict[str, Any]) -> Dict[str, Any]:
    """モデルを推定してアーカイブを書き出します。

    Args:
        params (Dict[str, Any]): パラメータ辞書
            - data_path (str): 学習データのCSV
            - config (dict, optional): 推定設定
            - config_path (str, optional): 推定設定のJSONファイル
            - archive_path (str): 出力アーカイブのパス
            - init_archive (str, optional): ウォームスタートに使うアーカイブ

    Returns:
        Dict[str, Any]: 推定結果の要約
    """
    try:
        data_path = params.get("data_path")
        archive_path = params.get("archive_path")
        if not data_path:
            raise ValueError("data_pathパラメータが必要です")
        if not archive_path:
            raise ValueError("archive_pathパラメータが必要です")
        if params.get("config") is not None:
            config = fit_config_from_dict(params["config"])
        elif params.get("config_path"):
            config = load_fit_config(params["config_path"])
        else:
            raise ValueError("configまたはconfig_pathパラメータが必要です")

        archive = fit_to_archive(data_path, config, archive_path, init_archive=params.get("init_archive"))
        return json_result({"archive": archive_path, **fit_summary(archive)})

    except Exception as e:
        return text_result(f"推定エラー: {str(e)}", is_error=True)


def predict_premiums(params: Dict[str, Any]) -> Dict[str, Any]:
    """事後純保険料を予測します。

    Args:
        params (Dict[str, Any]): パラメータ辞書
            - archive_path (str): モデルアーカイブ
            - data_path (str): 予測対象データのCSV
            - output_path (str): 出力CSVのパス
            - samples (int, optional): モンテカルロサンプル数
            - seed (int, optional): 乱数シード

    Returns:
        Dict[str, Any]: 実行結果
    """
    try:
        for key in ("archive_path", "data_path", "output_path"):
            if not params.get(key):
                raise ValueError(f"{key}パラメータが必要です")
        seed = params.get("seed")
        summary = predict_to_file(
            params["archive_path"],
            params["data_path"],
            params["output_path"],
            M=int(params.get("samples", 1000)),
            seed=default_seed() if seed is None else int(seed),
        )
        return text_result(
            f"事後純保険料を予測しました。\n"
            f"出力ファイル: {summary['output']}\n"
            f"行数: {summary['rows']}\n"
            f"未知の因子を含む行: {summary['unseen_rows']}"
        )

    except Exception as e:
        return text_result(f"予測エラー: {str(e)}", is_error=True)


def evaluate_model(params: Dict[str, Any]) -> Dict[str, Any]:
    """テストデータでモデルを評価します。

    Args:
        params (Dict[str, Any]): パラメータ辞書
            - archive_path (str): モデルアーカイブ
            - data_path (str): テストデータのCSV
            - samples (int, optional): モンテカルロサンプル数
            - seed (int, optional): 乱数シード（省略時は推定時のシード）
            - elbo_samples (int, optional): ELBO のサンプル数（省略時は推定時の M）
            - loss_column (str, optional): 損失列

    Returns:
        Dict[str, Any]: 評価指標
    """
    try:
        for key in ("archive_path", "data_path"):
            if not params.get(key):
                raise ValueError(f"{key}パラメータが必要です")
        seed = params.get("seed")
        scores = evaluate_files(
            params["archive_path"],
            params["data_path"],
            M=int(params.get("samples", 1000)),
            seed=None if seed is None else int(seed),
            loss_column=params.get("loss_column"),
            elbo_samples=None if params.get("elbo_samples") is None else int(params["elbo_samples"]),
        )
        return json_result(scores)

    except Exception as e:
        return text_result(f"評価エラー: {str(e)}", is_error=True)


def select_classes(params: Dict[str, Any]) -> Dict[str, Any]:
    """検証データの AIC でクラス数を選びます。

    Args:
        params (Dict[str, Any]): パラメータ辞書
            - data_path (str): 学習データのCSV
            - validation_path (str): 検証データのCSV
            - g_values (list): 候補のクラス数
            - config (dict, optional): 推定設定（省略時は {"g": 候補の最小値}）
            - config_path (str, optional): 推定設定のJSONファイル
            - output_dir (str, optional): 候補ごとのアーカイブの出力先
            - samples (int, optional): 評価のモンテカルロサンプル数
            - seed (int, optional): 評価の乱数シード
            - nested (bool, optional): 小さい g の結果を埋め込んで推定するかどうか

    Returns:
        Dict[str, Any]: 候補ごとの指標と選ばれたクラス数
    """
    try:
        for key in ("data_path", "validation_path"):
            if not params.get(key):
                raise ValueError(f"{key}パラメータが必要です")
        g_values = params.get("g_values")
        if not isinstance(g_values, list) or not g_values:
            raise ValueError("g_valuesパラメータ（整数のリスト）が必要です")
        if params.get("config_path"):
            config = load_fit_config(params["config_path"])
        else:
            config = fit_config_from_dict({"g": min(int(g) for g in g_values), **(params.get("config") or {})})

        seed = params.get("seed")
        result = select_g(
            params["data_path"],
            params["validation_path"],
            [int(g) for g in g_values],
            config,
            out_dir=params.get("output_dir"),
            M=int(params.get("samples", 1000)),
            seed=None if seed is None else int(seed),
            nested=bool(params.get("nested", False)),
        )
        return json_result(result)

    except Exception as e:
        return text_result(f"クラス数選択エラー: {str(e)}", is_error=True)

def validate_fit_config(params: Dict[str, Any]) -> Dict[str, Any]:
    """推定設定を検証します。

    Args:
        params (Dict[str, Any]): パラメータ辞書
            - config (dict): 推定設定

    Returns:
        Dict[str, Any]: 検証結果
    """
    try:
        config = params.get("config")
        if not isinstance(config, dict):
            raise ValueError("configパラメータ（オブジェクト）が必要です")

        validated = fit_config_from_dict(config)
        return text_result(
            f"推定設定は有効です。\n"
            f"クラス数: {validated.g}\n"
            f"エキスパート: {[list(row) for row in validated.expert_spec]}\n"
            f"サンプル数 M: {validated.M}"
        )

    except Exception as e:
        return text_result(f"推定設定エラー: {str(e)}", is_error=True)
