"""Checkpoint registry and the trace-generation REST service.

``POST /generate?format=json|text`` with an optional JSON body::

    {"context": "STREAM_HIGH", "users": 2, "seq_len": 3,
     "normalize": "pos", "shuffle": false, "seed": 7}

``seed`` is an extension for reproducible responses. ``GET /health``
reports the loaded contexts.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .massgan import GanModel, load_checkpoint
from .trace import ContextLabel, format_text, normalize

log = logging.getLogger(__name__)

MAX_USERS = 10_000
MAX_SEQ_LEN = 100_000


class RegistryError(RuntimeError):
    pass


class ModelRegistry:
    """Immutable map from context label to a loaded generator; GLOBAL is mandatory."""

    def __init__(self, models: dict[ContextLabel, GanModel], paths: dict[ContextLabel, Path] | None = None):
        if ContextLabel.GLOBAL not in models:
            raise RegistryError("registry has no GLOBAL model")
        self._models = dict(models)
        self.paths = dict(paths or {})

    def __contains__(self, label) -> bool:
        return ContextLabel.parse(label) in self._models

    @property
    def contexts(self) -> list[ContextLabel]:
        return sorted(self._models, key=lambda c: list(ContextLabel).index(c))

    def resolve(self, label) -> tuple[ContextLabel, GanModel]:
        """The model serving ``label``, falling back to GLOBAL."""
        label = ContextLabel.parse(label) if not isinstance(label, ContextLabel) else label
        if label in self._models:
            return label, self._models[label]
        return ContextLabel.GLOBAL, self._models[ContextLabel.GLOBAL]


def load_registry(directory) -> ModelRegistry:
    """Load every ``<CONTEXT>.ckpt`` in ``directory``.

    A corrupt context checkpoint is skipped with a warning; a missing or
    corrupt GLOBAL checkpoint is fatal.
    """
    directory = Path(directory)
    models, paths = {}, {}
    for path in sorted(directory.glob("*.ckpt")):
        try:
            label = ContextLabel.parse(path.stem)
        except ValueError:
            log.warning("ignoring %s: not a context name", path.name)
            continue
        try:
            model = load_checkpoint(path)
        except (ValueError, KeyError, OSError, RuntimeError) as exc:
            if label is ContextLabel.GLOBAL:
                raise RegistryError(f"GLOBAL checkpoint {path} is unusable: {exc}") from exc
            log.warning("skipping corrupt checkpoint %s: %s", path, exc)
            continue
        model.generator.eval()
        models[label], paths[label] = model, path
    if ContextLabel.GLOBAL not in models:
        raise RegistryError(f"no GLOBAL.ckpt in {directory}")
    log.info("loaded contexts: %s", ", ".join(c.value for c in models))
    return ModelRegistry(models, paths)


class BadRequest(ValueError):
    pass


@dataclass
class GenerateRequest:
    context: str = "GLOBAL"
    users: int = 1
    seq_len: int = 100
    normalize: str = "pos"
    shuffle: bool = False
    seed: int | None = None

    @classmethod
    def from_json(cls, body: bytes | str | None) -> "GenerateRequest":
        if body is None or not body.strip():
            return cls()
        try:
            data = json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise BadRequest(f"malformed JSON body: {exc}") from None
        if not isinstance(data, dict):
            raise BadRequest("request body must be a JSON object")
        unknown = set(data) - {"context", "users", "seq_len", "normalize", "shuffle", "seed"}
        if unknown:
            raise BadRequest(f"unknown fields: {sorted(unknown)}")
        req = cls(**data)
        req.validate()
        return req

    def validate(self) -> None:
        def is_int(v):
            return isinstance(v, int) and not isinstance(v, bool)

        if not isinstance(self.context, str):
            raise BadRequest("context must be a string")
        try:
            ContextLabel.parse(self.context)
        except ValueError as exc:
            raise BadRequest(str(exc)) from None
        if not is_int(self.users) or not 1 <= self.users <= MAX_USERS:
            raise BadRequest(f"users must be an integer in [1, {MAX_USERS}]")
        if not is_int(self.seq_len) or not 1 <= self.seq_len <= MAX_SEQ_LEN:
            raise BadRequest(f"seq_len must be an integer in [1, {MAX_SEQ_LEN}]")
        if self.normalize not in ("pos", "minmax"):
            raise BadRequest("normalize must be 'pos' or 'minmax'")
        if not isinstance(self.shuffle, bool):
            raise BadRequest("shuffle must be a boolean")
        if self.seed is not None and (not is_int(self.seed) or self.seed < 0):
            raise BadRequest("seed must be a non-negative integer")


def circular_shift(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotate each user's series forward by a random offset; values falling off the end wrap to the front."""
    out = np.empty_like(values)
    for i in range(values.shape[0]):
        out[i] = np.roll(values[i], int(rng.integers(values.shape[1])), axis=0)
    return out


def generate(registry: ModelRegistry, req: GenerateRequest) -> np.ndarray:
    """Trace array of shape ``(users, seq_len, 2)`` for a validated request."""
    _, model = registry.resolve(ContextLabel.parse(req.context))
    ss = np.random.SeedSequence(req.seed)
    latent_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    values = model.generate(req.users, req.seq_len, seed=latent_seed)
    values = normalize(values, req.normalize).values
    if req.shuffle:
        values = circular_shift(values, np.random.default_rng(shuffle_seed))
    return values


def render(values: np.ndarray, fmt: str) -> tuple[bytes, str]:
    if fmt == "json":
        return json.dumps({"trace": values.tolist()}).encode(), "application/json"
    if fmt == "text":
        return format_text(values).encode(), "text/plain; charset=utf-8"
    raise BadRequest(f"unknown format {fmt!r}")


def handle_generate(registry: ModelRegistry, body, fmt: str = "json") -> tuple[bytes, str]:
    """Request body in, ``(response body, content type)`` out; raises BadRequest."""
    if fmt not in ("json", "text"):
        raise BadRequest(f"unknown format {fmt!r}")
    req = GenerateRequest.from_json(body)
    return render(generate(registry, req), fmt)


class _Handler(BaseHTTPRequestHandler):
    registry: ModelRegistry
    server_version = "mass-genserver/1"

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes, ctype: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._send(status, json.dumps({"error": message}).encode(), "application/json")

    def do_GET(self):
        if urlparse(self.path).path != "/health":
            return self._error(404, "not found")
        body = {"status": "ok", "contexts": [c.value for c in self.registry.contexts]}
        self._send(200, json.dumps(body).encode(), "application/json")

    def do_POST(self):
        url = urlparse(self.path)
        if url.path != "/generate":
            return self._error(404, "not found")
        fmt = parse_qs(url.query).get("format", ["json"])[-1]
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            return self._error(400, "bad Content-Length")
        body = self.rfile.read(length) if length > 0 else b""
        try:
            payload, ctype = handle_generate(self.registry, body, fmt)
        except BadRequest as exc:
            return self._error(400, str(exc))
        self._send(200, payload, ctype)


def make_server(registry: ModelRegistry, host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"registry": registry})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve_in_thread(registry: ModelRegistry, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a background thread; returns ``(server, thread)``."""
    server = make_server(registry, host, port)
    thread = threading.Thread(target=server.serve_forever, name="genserver", daemon=True)
    thread.start()
    return server, thread
