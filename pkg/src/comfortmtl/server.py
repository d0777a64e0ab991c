"""Minimal JSON-over-HTTP prediction endpoint for a trained model.

The server only reads the model; it never trains or mutates it, so one
loaded network is shared by all request threads. There is no
authentication: this is a demonstration endpoint for trusted networks.
"""

from __future__ import annotations

import json
import logging
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from .mtl import MtlNetwork, PredictError, check_features, model_checksum, predict, record_from_mapping
from .schema import Violation

log = logging.getLogger(__name__)

MAX_BODY = 1 << 20


def _violation_dict(v: Violation) -> dict:
    return {"field": v.field, "kind": v.kind, "message": v.message}


def handle_predict(net: MtlNetwork, body: bytes) -> tuple[int, dict[str, Any]]:
    """Status code and JSON document for one ``POST /predict`` body."""
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return 400, {"error": "malformed JSON body",
                     "violations": [{"field": "", "kind": "malformed body", "message": str(exc)}]}
    if not isinstance(doc, dict) or not isinstance(doc.get("features"), dict):
        return 400, {"error": "body must be an object with a 'features' object",
                     "violations": [{"field": "features", "kind": "malformed body",
                                     "message": "expected {\"features\": {name: value, ...}}"}]}
    record = record_from_mapping(net.schema, doc["features"])
    problems = check_features(net.schema, record)
    if problems:
        return 400, {"error": "invalid features", "violations": [_violation_dict(v) for v in problems]}
    try:
        out = predict(net, record)
    except PredictError as exc:  # pragma: no cover - check_features already ran
        return 400, {"error": "invalid features", "violations": [_violation_dict(v) for v in exc.violations]}
    return 200, {"tasks": {t: p.to_dict() for t, p in out.items()}}


def make_handler(net: MtlNetwork, checksum: str):
    class Handler(BaseHTTPRequestHandler):
        server_version = "comfortmtl"

        def _send(self, status: int, doc: dict) -> None:
            data = json.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/health":
                self._send(200, {"status": "ok", "model_checksum": checksum})
            else:
                self._send(404, {"error": f"unknown route {self.path}"})

        def do_POST(self):
            if self.path != "/predict":
                self._send(404, {"error": f"unknown route {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self._send(413, {"error": "body too large"})
                return
            status, doc = handle_predict(net, self.rfile.read(length))
            self._send(status, doc)

        def log_message(self, fmt, *args):
            log.info("%s %s", self.address_string(), fmt % args)

    return Handler


def make_server(net: MtlNetwork, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Bind (raises ``OSError`` when the port is taken) without starting the loop."""
    checksum = getattr(net, "checksum", None) or model_checksum(net)
    server = ThreadingHTTPServer((host, port), make_handler(net, checksum))
    server.daemon_threads = True
    return server
