"""HTTP JSON API over a loaded model: complete, score, generate, health.

One model is loaded at startup and shared read-only by every request
handler, so concurrent requests are trivially consistent with serial ones.
Probabilities in responses are rounded to six decimals to keep parity
checks against direct library calls stable across serializations.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .assist import autocomplete, detect_anomalies
from .context import CONTEXT_TOKEN_LIMIT, RecordContext, truncate_context
from .dataset import serialize_ablated
from .generation import DecodeConfig, beam_decode, score_tokens
from .model import ModelConfig, ModelParams
from .tokenizer import BYTE_BASE, Vocab, load_vocab
from .training import load_checkpoint

log = logging.getLogger(__name__)

DEFAULT_PORT = 8765
MAX_K = 50


@dataclass(frozen=True)
class ModelBundle:
    params: ModelParams
    cfg: ModelConfig
    vocab: Vocab
    model_id: str


class RequestError(ValueError):
    """A client mistake; carries the HTTP status to answer with."""

    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


def load_bundle(checkpoint_path, vocab_path) -> ModelBundle:
    cfg, params, step, _ = load_checkpoint(checkpoint_path)
    vocab = load_vocab(vocab_path)
    if vocab.size > cfg.vocab_size:
        raise ValueError(
            f"vocab has {vocab.size} tokens but model only covers {cfg.vocab_size}"
        )
    model_id = f"{Path(checkpoint_path).stem}:{step}"
    return ModelBundle(params=params, cfg=cfg, vocab=vocab, model_id=model_id)


def _context_tokens(bundle: ModelBundle, raw) -> list[int]:
    if not isinstance(raw, dict):
        raise RequestError("context: expected a JSON object")
    try:
        ctx = RecordContext.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise RequestError(f"context: {exc}") from exc
    marked = serialize_ablated(ctx)
    return truncate_context(bundle.vocab.encode(marked), CONTEXT_TOKEN_LIMIT)


def _field(body: dict, name: str, kind, default=None, required=False):
    if name not in body:
        if required:
            raise RequestError(f"{name}: required")
        return default
    value = body[name]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise RequestError(f"{name}: expected {kind.__name__}")
    return value


def handle_complete(bundle: ModelBundle, body: dict) -> dict:
    ctx = _context_tokens(bundle, _field(body, "context", dict, required=True))
    prefix = _field(body, "prefix", str, default="")
    k = _field(body, "k", int, default=5)
    horizon = _field(body, "horizon", int, default=1)
    if not 1 <= k <= MAX_K:
        raise RequestError(f"k: must be in 1..{MAX_K}")
    if horizon < 1:
        raise RequestError("horizon: must be >= 1")
    comps = autocomplete(
        bundle.params, bundle.cfg, bundle.vocab,
        ctx, bundle.vocab.encode(prefix), horizon=horizon, k=k,
    )
    return {
        "suggestions": [
            {"text": "".join(c.tokens), "prob": round(c.joint_prob, 6)}
            for c in comps
        ],
        "model_id": bundle.model_id,
    }


def handle_score(bundle: ModelBundle, body: dict) -> dict:
    ctx = _context_tokens(bundle, _field(body, "context", dict, required=True))
    note = _field(body, "note", str, required=True)
    k_sigma = _field(body, "k_sigma", float, default=2.0)
    note_tokens = bundle.vocab.encode(note)
    flags = detect_anomalies(
        bundle.params, bundle.cfg, bundle.vocab, ctx, note_tokens, k_sigma=k_sigma
    )
    scored = score_tokens(bundle.params, bundle.cfg, ctx, note_tokens, k=1)
    rows = []
    for i, tok in enumerate(note_tokens):
        flag = next((f for f in flags if f.start <= i < f.end), None)
        rows.append({
            "text": bundle.vocab.token_text(tok) if tok >= BYTE_BASE else "",
            "logprob": round(scored.token_logprobs[i], 6),
            "flagged": flag is not None,
            "suggestions": [
                {"text": s, "prob": round(p, 6)} for s, p in flag.suggestions
            ] if flag else [],
        })
    return {"tokens": rows, "model_id": bundle.model_id}


def handle_generate(bundle: ModelBundle, body: dict) -> dict:
    ctx = _context_tokens(bundle, _field(body, "context", dict, required=True))
    beam = _field(body, "beam", int, default=2)
    max_len = _field(body, "max_len", int, default=500)
    if beam < 1:
        raise RequestError("beam: must be >= 1")
    if max_len < 1:
        raise RequestError("max_len: must be >= 1")
    tokens, logprob = beam_decode(
        bundle.params, bundle.cfg, ctx,
        DecodeConfig(beam_size=beam, max_len=max_len),
    )
    return {
        "note": bundle.vocab.decode_text(tokens),
        "logprob": round(logprob, 6),
        "model_id": bundle.model_id,
    }


_POST_ROUTES = {
    "/v1/complete": handle_complete,
    "/v1/score": handle_score,
    "/v1/generate": handle_generate,
}


class _Handler(BaseHTTPRequestHandler):
    server_version = "notegen"
    protocol_version = "HTTP/1.1"

    @property
    def bundle(self) -> ModelBundle | None:
        return self.server.bundle

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(blob)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(blob)

    def do_OPTIONS(self):
        # CORS preflight, so a page served elsewhere can call the API
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        if self.path != "/v1/health":
            self._send_json(404, {"error": f"no route {self.path}"})
            return
        if self.bundle is None:
            self._send_json(200, {"status": "loading", "model_id": None})
        else:
            self._send_json(200, {"status": "ready",
                                  "model_id": self.bundle.model_id})

    def do_POST(self):
        handler = _POST_ROUTES.get(self.path)
        if handler is None:
            self._send_json(404, {"error": f"no route {self.path}"})
            return
        if self.bundle is None:
            self._send_json(503, {"error": "model not loaded"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            if not isinstance(body, dict):
                raise RequestError("body: expected a JSON object")
            self._send_json(200, handler(self.bundle, body))
        except json.JSONDecodeError as exc:
            self._send_json(400, {"error": f"body: invalid JSON ({exc.msg})"})
        except RequestError as exc:
            self._send_json(exc.status, {"error": str(exc)})
        except ValueError as exc:
            self._send_json(400, {"error": str(exc)})
        except Exception:
            log.exception("request failed")
            self._send_json(500, {"error": "internal error"})


def make_server(host: str, port: int,
                bundle: ModelBundle | None) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _Handler)
    server.bundle = bundle
    return server


def resolve_port(port: int | None) -> int:
    if port is not None:
        return port
    env = os.environ.get("NOTEGEN_PORT")
    return int(env) if env else DEFAULT_PORT


def serve(checkpoint_path, vocab_path, host: str = "127.0.0.1",
          port: int | None = None) -> None:
    """Load the model and serve requests until interrupted."""
    bundle = load_bundle(checkpoint_path, vocab_path)
    server = make_server(host, resolve_port(port), bundle)
    log.info("serving %s on http://%s:%d", bundle.model_id, host,
             server.server_address[1])
    try:
        server.serve_forever()
    finally:
        server.server_close()
