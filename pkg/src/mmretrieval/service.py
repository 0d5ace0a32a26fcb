"""JSON-over-HTTP query service.

``POST /v1/query`` with ``{text?, item_id?, k?, product_type?, refine?}``
(exactly one of ``text``/``item_id``) returns
``{"results": [{"item_id", "similarity", "rank"}, ...]}``.
``GET /v1/healthz`` returns ``{"status", "shards", "items"}``.
Errors come back as ``{"error": <type>, "message": <text>}`` with a 4xx/5xx status.
"""

from __future__ import annotations

import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import BackendUnavailable, EmptyIndex, RetrievalError, UnknownItem
from .pipeline import Engine

log = logging.getLogger(__name__)

MAX_BODY = 1 << 20


class _BadRequest(Exception):
    pass


def handle_query(engine: Engine, payload: object) -> dict:
    if not isinstance(payload, dict):
        raise _BadRequest("request body must be a JSON object")
    text, item_id = payload.get("text"), payload.get("item_id")
    if (text is None) == (item_id is None):
        raise _BadRequest("give exactly one of 'text' or 'item_id'")
    k = payload.get("k", engine.config.top_k)
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise _BadRequest("'k' must be a positive integer")
    if text is not None:
        if not isinstance(text, str) or not text.strip():
            raise _BadRequest("'text' must be a non-empty string")
        ptype = payload.get("product_type")
        if ptype is not None and not isinstance(ptype, str):
            raise _BadRequest("'product_type' must be a string")
        results = engine.query_text(text, k, ptype, bool(payload.get("refine", False)))
    else:
        if not isinstance(item_id, str):
            raise _BadRequest("'item_id' must be a string")
        results = engine.query_similar(item_id, k)
    return {"results": [r.to_json() for r in results]}


class QueryHandler(BaseHTTPRequestHandler):
    server: QueryServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: dict) -> None:
        raw = json.dumps(body, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _error(self, status: int, kind: str, message: str) -> None:
        self._send(status, {"error": kind, "message": message})

    def do_GET(self) -> None:
        if self.path == "/v1/healthz":
            self._send(HTTPStatus.OK, self.server.engine.health())
        else:
            self._error(HTTPStatus.NOT_FOUND, "NotFound", f"no route {self.path}")

    def do_POST(self) -> None:
        if self.path != "/v1/query":
            self._error(HTTPStatus.NOT_FOUND, "NotFound", f"no route {self.path}")
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self._error(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, "TooLarge", "request body too large")
            return
        try:
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            self._send(HTTPStatus.OK, handle_query(self.server.engine, payload))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            self._error(HTTPStatus.BAD_REQUEST, "BadRequest", f"invalid JSON: {exc}")
        except _BadRequest as exc:
            self._error(HTTPStatus.BAD_REQUEST, "BadRequest", str(exc))
        except UnknownItem as exc:
            self._error(HTTPStatus.NOT_FOUND, type(exc).__name__, str(exc))
        except EmptyIndex as exc:
            self._error(HTTPStatus.NOT_FOUND, type(exc).__name__, str(exc))
        except BackendUnavailable as exc:
            self._error(HTTPStatus.SERVICE_UNAVAILABLE, type(exc).__name__, str(exc))
        except (RetrievalError, ValueError) as exc:
            self._error(HTTPStatus.UNPROCESSABLE_ENTITY, type(exc).__name__, str(exc))
        except Exception as exc:
            log.exception("query failed")
            self._error(HTTPStatus.INTERNAL_SERVER_ERROR, "InternalError", str(exc))


class QueryServer(ThreadingHTTPServer):
    daemon_threads = True
    # the socketserver default backlog of 5 resets bursts of concurrent clients
    request_queue_size = 128

    def __init__(self, engine: Engine, host: str = "127.0.0.1", port: int = 8080) -> None:
        self.engine = engine
        super().__init__((host, port), QueryHandler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="query-server", daemon=True)
        thread.start()
        return thread


def parse_bind(bind: str) -> tuple[str, int]:
    host, sep, port = bind.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bind address must look like HOST:PORT, got {bind!r}")
    return host or "127.0.0.1", int(port)
