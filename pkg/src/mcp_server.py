"""
MCPサーバーモジュール

Mixed LRMoE の推定・予測・評価を Model Context Protocol (MCP) のツールとして公開します。
JSON-RPC over stdio でクライアントからのリクエストを処理します。
"""

import sys
import json
from typing import Any, Callable, Dict, List, Optional, TextIO

from mcp.types import LATEST_PROTOCOL_VERSION, CallToolResult, TextContent, Tool

from .log_config import setup_logger

ToolHandler = Callable[[Dict[str, Any]], Dict[str, Any]]


def text_result(text: str, is_error: bool = False) -> Dict[str, Any]:
    """ツールの実行結果をMCPのコンテンツ形式に変換します。

    Args:
        text: 結果のテキスト
        is_error: エラー結果かどうか

    Returns:
        Dict[str, Any]: {"content": [...]} 形式の辞書（エラー時のみ "isError": True を含む）
    """
    result = CallToolResult(content=[TextContent(type="text", text=text)], isError=is_error)
    payload = result.model_dump(exclude_none=True)
    if not is_error:
        payload.pop("isError", None)
    return payload


def json_result(payload: Any) -> Dict[str, Any]:
    """JSONに変換できる結果をテキストのコンテンツとして返します。"""
    return text_result(json.dumps(payload, ensure_ascii=False, indent=2))


class MCPServer:
    """
    Model Context Protocol (MCP)に準拠したサーバークラス

    Attributes:
        tools: 登録されたツール定義（mcp.types.Tool）のディクショナリ
        tool_handlers: ツール名からハンドラ関数へのディクショナリ
        logger: ロガー
    """

    def __init__(self, output: Optional[TextIO] = None):
        """
        MCPServerのコンストラクタ

        Args:
            output: レスポンスの出力先（省略時は標準出力）
        """
        self.tools: Dict[str, Tool] = {}
        self.tool_handlers: Dict[str, ToolHandler] = {}
        self.server_info = {"name": "mixed-lrmoe", "version": "0.1.0"}
        self.output = output
        self.logger = setup_logger("mcp_server")

    def register_tool(self, name: str, description: str, input_schema: Dict[str, Any], handler: ToolHandler):
        """
        ツールを登録します。

        Args:
            name: ツール名
            description: ツールの説明
            input_schema: 入力スキーマ（JSON Schema）
            handler: ツールのハンドラ関数
        """
        self.tools[name] = Tool(name=name, description=description, inputSchema=input_schema)
        self.tool_handlers[name] = handler
        self.logger.info(f"ツール '{name}' を登録しました")

    def start(self, server_name: str = "mixed-lrmoe", version: str = "0.1.0", input_stream: Optional[TextIO] = None):
        """
        サーバーを起動し、入力ストリームからのリクエストを1行ずつ処理します。

        Args:
            server_name: サーバー名
            version: バージョン
            input_stream: リクエストの入力元（省略時は標準入力）
        """
        self.server_info = {"name": server_name, "version": version}
        stream = input_stream or sys.stdin
        self.logger.info(f"MCPサーバー '{server_name}' を起動しました")

        while True:
            request_line = stream.readline()
            if not request_line:
                break
            if not request_line.strip():
                continue
            try:
                request = json.loads(request_line)
            except json.JSONDecodeError:
                self.logger.error("JSONのパースに失敗しました")
                self._send_error(-32700, "Parse error", None)
                continue

            self.logger.info(f"リクエストを受信しました: {request.get('method') if isinstance(request, dict) else request}")
            try:
                self._handle_request(request)
            except Exception as e:
                self.logger.error(f"エラーが発生しました: {str(e)}")
                self._send_error(-32603, f"Internal error: {str(e)}", None)

        self.logger.info("入力が終了したためサーバーを停止します")

    def _handle_request(self, request: Dict[str, Any]):
        """
        リクエストを処理します。

        Args:
            request: JSONリクエスト
        """
        if not isinstance(request, dict) or request.get("jsonrpc") != "2.0":
            self._send_error(-32600, "Invalid Request", request.get("id") if isinstance(request, dict) else None)
            return
        if "method" not in request:
            self._send_error(-32600, "Method not specified", request.get("id"))
            return

        method = request["method"]
        params = request.get("params") or {}
        request_id = request.get("id")

        if method == "initialize":
            self._handle_initialize(params, request_id)
        elif method == "notifications/initialized":
            self.logger.info("クライアントの初期化が完了しました")
        elif method == "ping":
            self._send_result({}, request_id)
        elif method == "tools/list":
            self._send_result({"tools": self._get_tools()}, request_id)
        elif method == "tools/call":
            self._handle_tools_call(params, request_id)
        elif method == "resources/list":
            self._send_result({"resources": []}, request_id)
        else:
            self._send_error(-32601, f"Method not found: {method}", request_id)

    def _handle_initialize(self, params: Dict[str, Any], request_id: Any):
        """
        initializeメソッドを処理します。

        Args:
            params: リクエストパラメータ
            request_id: リクエストID
        """
        client = params.get("clientInfo", {})
        self.logger.info(f"クライアント '{client.get('name', 'unknown')} {client.get('version', 'unknown')}' が接続しました")
        response = {
            "protocolVersion": params.get("protocolVersion", LATEST_PROTOCOL_VERSION),
            "serverInfo": self.server_info,
            "capabilities": {"tools": {"listChanged": False}},
            "instructions": (
                "Mixed LRMoE サーバーの使い方:\n"
                "1. simulate_dataset でデータを生成するか、既存のCSVを用意します。\n"
                "2. fit_model でアーカイブを作成し、predict_premiums / evaluate_model に渡します。"
            ),
        }
        self._send_result(response, request_id)

    def _handle_tools_call(self, params: Dict[str, Any], request_id: Any):
        """
        tools/callメソッドを処理します。

        Args:
            params: リクエストパラメータ
            request_id: リクエストID
        """
        if "name" not in params:
            self._send_error(-32602, "Invalid params: name is required", request_id)
            return

        tool_name = params["name"]
        arguments = params.get("arguments") or {}
        if tool_name not in self.tool_handlers:
            self._send_result(text_result(f"ツールが見つかりません: {tool_name}", is_error=True), request_id)
            return

        try:
            result = self.tool_handlers[tool_name](arguments)
        except Exception as e:
            self.logger.error(f"ツール '{tool_name}' の実行中にエラーが発生しました: {str(e)}")
            result = text_result(f"ツールの実行中にエラーが発生しました: {str(e)}", is_error=True)
        if not (isinstance(result, dict) and "content" in result):
            result = text_result(str(result))
        self._send_result(result, request_id)

    def _send_result(self, result: Any, request_id: Any):
        """成功レスポンスを送信します。"""
        self._send_response({"jsonrpc": "2.0", "result": result, "id": request_id})

    def _send_error(self, code: int, message: str, request_id: Any):
        """エラーレスポンスを送信します。"""
        self._send_response({"jsonrpc": "2.0", "error": {"code": code, "message": message}, "id": request_id})

    def _send_response(self, response: Dict[str, Any]):
        """
        レスポンスを出力先に1行のJSONとして送信します。

        Args:
            response: レスポンス
        """
        response_json = json.dumps(response, ensure_ascii=False)
        print(response_json, file=self.output or sys.stdout, flush=True)
        self.logger.debug(f"レスポンスを送信しました: {response_json}")

    def _get_tools(self) -> List[Dict[str, Any]]:
        """
        登録されたツールの一覧をJSONに変換できる形で返します。

        Returns:
            ツールの一覧
        """
        return [tool.model_dump(exclude_none=True) for tool in self.tools.values()]
