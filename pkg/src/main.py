#!/usr/bin/env python
"""
Mixed LRMoE コマンドラインインターフェース

サブコマンド:
    simulate  データ生成仕様からデータセットと真値を書き出す
    fit       データセットを推定してモデルアーカイブを書き出す
    predict   アーカイブを使って事後純保険料・クラス確率・信用区間を書き出す
    evaluate  テストデータで ELBO・近似対数尤度・AIC（と Gini 係数）を計算する
    select    候補のクラス数ごとに推定し、検証データの AIC でクラス数を選ぶ
    serve     推定・予測・評価を MCP ツールとして公開するサーバーを起動する

終了コード: 0 成功、2 入力エラー、3 未収束（アーカイブは書き出し済み）、4 数値計算エラー
"""

import sys
import json
import argparse
import importlib
from typing import List, Optional

from dotenv import load_dotenv

from .data_io import default_seed, load_fit_config, load_sim_spec
from .errors import InitializationError, InvalidArgumentError, LRMoEError, NumericalError
from .log_config import setup_logger
from .lrmoe_tools import register_lrmoe_tools
from .mcp_server import MCPServer
from .workflows import (
    evaluate_files,
    fit_summary,
    fit_to_archive,
    format_scores,
    predict_to_file,
    select_g,
    simulate_to_file,
)

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERICAL_ERROR = 4


def build_parser() -> argparse.ArgumentParser:
    """コマンドライン引数のパーサーを作成します。"""
    parser = argparse.ArgumentParser(
        prog="mixed-lrmoe",
        description="Mixed LRMoE - ランダム効果付き混合エキスパートモデルの推定と事後料率算定",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="合成データを生成します")
    simulate.add_argument("--spec", required=True, help="データ生成仕様（JSON）")
    simulate.add_argument("--out", required=True, help="出力CSVのパス（真値は <out>.truth.json）")

    fit = subparsers.add_parser("fit", help="モデルを推定します")
    fit.add_argument("--data", required=True, help="学習データ（CSV）")
    fit.add_argument("--config", required=True, help="推定設定（JSON）")
    fit.add_argument("--out", required=True, help="出力アーカイブ（JSON）")
    fit.add_argument("--init", help="ウォームスタートに使うアーカイブ")

    predict = subparsers.add_parser("predict", help="事後純保険料を予測します")
    predict.add_argument("--archive", required=True, help="モデルアーカイブ")
    predict.add_argument("--data", required=True, help="予測対象データ（CSV）")
    predict.add_argument("--out", required=True, help="出力CSVのパス")
    predict.add_argument("--samples", type=int, default=1000, help="モンテカルロサンプル数")
    predict.add_argument("--seed", type=int, help="乱数シード")

    evaluate = subparsers.add_parser("evaluate", help="テストデータでモデルを評価します")
    evaluate.add_argument("--archive", required=True, help="モデルアーカイブ")
    evaluate.add_argument("--data", required=True, help="テストデータ（CSV）")
    evaluate.add_argument("--samples", type=int, default=1000, help="モンテカルロサンプル数")
    evaluate.add_argument("--seed", type=int, help="乱数シード（省略時は推定時のシード）")
    evaluate.add_argument("--elbo-samples", type=int, help="ELBO のサンプル数（省略時は推定時の M）")
    evaluate.add_argument("--loss-column", help="Lorenz 曲線・Gini 係数に使う損失列")
    evaluate.add_argument("--lorenz-out", help="Lorenz 曲線の点を書き出すCSVのパス")

    select = subparsers.add_parser("select", help="検証データの AIC でクラス数を選択します")
    select.add_argument("--data", required=True, help="学習データ（CSV）")
    select.add_argument("--validation", required=True, help="検証データ（CSV）")
    select.add_argument("--config", required=True, help="推定設定（JSON、g は --g の各値で置き換え）")
    select.add_argument("--g", type=int, nargs="+", required=True, help="候補のクラス数")
    select.add_argument("--out-dir", help="候補ごとのアーカイブの出力先")
    select.add_argument("--samples", type=int, default=1000, help="評価のモンテカルロサンプル数")
    select.add_argument("--seed", type=int, help="評価の乱数シード（省略時は推定設定のシード）")
    select.add_argument("--nested", action="store_true", help="小さい g の推定結果を埋め込んで次の g を推定する")

    serve = subparsers.add_parser("serve", help="MCPサーバーを起動します")
    serve.add_argument("--name", default="mixed-lrmoe", help="サーバー名")
    serve.add_argument("--version", default="0.1.0", help="サーバーバージョン")
    serve.add_argument("--module", help="追加のツールモジュール（例: myapp.tools）")
    return parser


def _serve(args) -> int:
    server = MCPServer()
    register_lrmoe_tools(server)

    # 追加のツールモジュールがある場合は読み込む
    if args.module:
        try:
            module = importlib.import_module(args.module)
            if hasattr(module, "register_tools"):
                module.register_tools(server)
                print(f"モジュール '{args.module}' からツールを登録しました", file=sys.stderr)
            else:
                print(f"警告: モジュール '{args.module}' に register_tools 関数が見つかりません", file=sys.stderr)
        except ImportError as e:
            print(f"警告: モジュール '{args.module}' の読み込みに失敗しました: {str(e)}", file=sys.stderr)

    server.start(args.name, args.version)
    return EXIT_OK


def run(args) -> int:
    """サブコマンドを実行し、終了コードを返します。"""
    if args.command == "simulate":
        summary = simulate_to_file(load_sim_spec(args.spec), args.out)
        print(json.dumps(summary, ensure_ascii=False))
        return EXIT_OK

    if args.command == "fit":
        archive = fit_to_archive(args.data, load_fit_config(args.config), args.out, init_archive=args.init)
        print(format_scores(fit_summary(archive)))
        if not archive.report.converged:
            print(f"警告: 最大反復回数で停止しました（アーカイブは {args.out} に保存済み）", file=sys.stderr)
            return EXIT_NOT_CONVERGED
        return EXIT_OK

    if args.command == "select":
        result = select_g(
            args.data,
            args.validation,
            args.g,
            load_fit_config(args.config),
            out_dir=args.out_dir,
            M=args.samples,
            seed=args.seed,
            nested=args.nested,
        )
        print(format_scores(result))
        return EXIT_OK

    if args.samples < 1:
        raise InvalidArgumentError(f"--samples は1以上である必要があります: {args.samples}")

    if args.command == "predict":
        seed = args.seed if args.seed is not None else default_seed()
        summary = predict_to_file(args.archive, args.data, args.out, M=args.samples, seed=seed)
        print(json.dumps(summary, ensure_ascii=False))
        if summary["unseen_rows"]:
            print(f"未知の因子を含む {summary['unseen_rows']} 行には事前分布を使用しました", file=sys.stderr)
        return EXIT_OK

    scores = evaluate_files(
        args.archive,
        args.data,
        M=args.samples,
        seed=args.seed,
        loss_column=args.loss_column,
        lorenz_out=args.lorenz_out,
        elbo_samples=args.elbo_samples,
    )
    print(format_scores(scores))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    メイン関数

    コマンドライン引数を解析してサブコマンドを実行し、例外を終了コードに対応付けます。
    """
    args = build_parser().parse_args(argv)

    # 環境変数の読み込み
    load_dotenv()
    logger = setup_logger("src")

    if args.command == "serve":
        try:
            return _serve(args)
        except KeyboardInterrupt:
            print("サーバーを終了します。", file=sys.stderr)
            return EXIT_OK

    try:
        return run(args)
    except (InitializationError, NumericalError) as e:
        logger.error(f"数値計算エラー: {str(e)}")
        print(f"数値計算エラー: {str(e)}", file=sys.stderr)
        for item in getattr(e, "diagnostics", []):
            print(f"  {item}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except (LRMoEError, ValueError, FileNotFoundError) as e:
        logger.error(f"入力エラー: {str(e)}")
        print(f"入力エラー: {str(e)}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
