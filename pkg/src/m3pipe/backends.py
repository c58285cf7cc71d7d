"""Translation, embedding and generation backends.

Real model servers are reached over HTTP (``POST /translate``, ``/embed``,
``/generate`` with JSON bodies). The mock backends are deterministic and
cheap so the whole pipeline can run on a laptop:

* :class:`MockTranslator` applies a reversible letter rotation keyed on the
  language pair, so en->xx->en is the identity.
* :class:`MockEmbedder` derives a 16-d vector from a hash of the input.
* :class:`ScriptedGenerator` answers from a user-supplied function.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import re
import string
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Protocol, Sequence, runtime_checkable

import httpx

from m3pipe.errors import ProtocolError, TransportError, ValidationError
from m3pipe.records import parse_language

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

BATCH_CAP = 64
EMBED_DIM = 16


def fnv1a64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


# --------------------------------------------------------------------------
# protocols


@runtime_checkable
class Translator(Protocol):
    def translate(self, texts: Sequence[str], src: str, tgt: str) -> list[str]: ...


@runtime_checkable
class Embedder(Protocol):
    def embed(self, items: Sequence[str], kind: str) -> list[list[float]]: ...


@runtime_checkable
class Generator(Protocol):
    def generate(self, prompt: str, image_refs: Sequence[str] = (), max_tokens: int = 64) -> str: ...


# --------------------------------------------------------------------------
# mocks

# Anything between the sentinel brackets is left alone so masked placeholders
# survive the mock exactly like they are expected to survive a real model.
_SENTINEL_SPAN = re.compile(r"⟦[^⟦⟧]*⟧")


@functools.lru_cache(maxsize=None)
def rotation_for(src: str, tgt: str) -> int:
    """Signed letter rotation used by the mock for ``src -> tgt``."""
    lo, hi = sorted((src, tgt))
    k = 1 + fnv1a64(f"{lo}|{hi}") % 7
    return k if src < tgt else -k


@functools.lru_cache(maxsize=None)
def _rotation_table(shift: int) -> dict[int, int]:
    lower, upper = string.ascii_lowercase, string.ascii_uppercase
    s = shift % 26
    return str.maketrans(lower + upper, lower[s:] + lower[:s] + upper[s:] + upper[:s])


def mock_translate(text: str, src: str, tgt: str) -> str:
    parse_language(src)
    parse_language(tgt)
    if src == tgt:
        raise ValidationError(f"source and target language are both {src!r}")
    table = _rotation_table(rotation_for(src, tgt))
    out: list[str] = []
    pos = 0
    for m in _SENTINEL_SPAN.finditer(text):
        out.append(text[pos : m.start()].translate(table))
        out.append(m.group())
        pos = m.end()
    out.append(text[pos:].translate(table))
    return "".join(out)


def mock_embed(item: str, kind: str = "text", dim: int = EMBED_DIM) -> list[float]:
    """Deterministic pseudo-embedding of ``item``, coordinates in [-1, 1)."""
    if kind not in ("text", "image"):
        raise ValidationError(f"unknown embedding kind {kind!r}")
    state = fnv1a64(f"{kind}\x1f{item}")
    vec = []
    for _ in range(dim):
        state, z = splitmix64_next(state)
        vec.append((z >> 11) * 2.0**-52 - 1.0)
    return vec


class MockTranslator:
    def __init__(self) -> None:
        self.calls = 0

    def translate(self, texts: Sequence[str], src: str, tgt: str) -> list[str]:
        self.calls += 1
        return [mock_translate(t, src, tgt) for t in texts]

    def probe(self) -> None:
        pass


class MockEmbedder:
    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def embed(self, items: Sequence[str], kind: str) -> list[list[float]]:
        return [mock_embed(x, kind, self.dim) for x in items]

    def probe(self) -> None:
        pass


class ScriptedGenerator:
    """Answers each prompt with ``script(prompt, image_refs)``."""

    def __init__(self, script: Callable[[str, Sequence[str]], str]):
        self.script = script
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, prompt: str, image_refs: Sequence[str] = (), max_tokens: int = 64) -> str:
        if max_tokens < 1:
            raise ValidationError("max_tokens must be >= 1")
        with self._lock:
            self.calls += 1
        return self.script(prompt, image_refs)

    def probe(self) -> None:
        pass


def constant_generator(answer: str) -> ScriptedGenerator:
    return ScriptedGenerator(lambda prompt, refs: answer)


# --------------------------------------------------------------------------
# wire protocol


def validate_response(kind: str, request: dict[str, Any], response: Any) -> dict[str, Any]:
    """Check a decoded response body against the invariants for ``kind``."""
    if not isinstance(response, dict):
        raise ProtocolError(f"{kind}: response body is not an object", field="<body>")
    if kind == "translate":
        out = response.get("translations")
        if not isinstance(out, list) or not all(isinstance(t, str) for t in out):
            raise ProtocolError("translate: 'translations' must be a list of strings", field="translations")
        if len(out) != len(request["texts"]):
            raise ProtocolError(
                f"translate: got {len(out)} translations for {len(request['texts'])} texts",
                field="translations",
            )
    elif kind == "embed":
        vecs = response.get("vectors")
        if not isinstance(vecs, list) or len(vecs) != len(request["items"]):
            raise ProtocolError("embed: expected one vector per item", field="vectors")
        dims = {len(v) if isinstance(v, list) else -1 for v in vecs}
        if len(dims) > 1 or (dims and min(dims) < 1):
            raise ProtocolError("embed: vectors must share one dimension >= 1", field="vectors")
        if not all(isinstance(x, (int, float)) for v in vecs for x in v):
            raise ProtocolError("embed: vector entries must be numbers", field="vectors")
    elif kind == "generate":
        if not isinstance(response.get("text"), str):
            raise ProtocolError("generate: 'text' must be a string", field="text")
    else:
        raise ValueError(f"unknown call kind {kind!r}")
    return response


def remote_call(
    client: httpx.Client,
    url: str,
    kind: str,
    request: dict[str, Any],
    *,
    retries: int = 3,
    backoff_base: float = 0.5,
    backoff_factor: float = 2.0,
    headers: dict[str, str] | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> dict[str, Any]:
    """POST ``request`` and return the validated response body.

    At most ``retries`` attempts are made; attempt ``i`` (0-based) that fails
    with a connection error, timeout or 5xx/429 status is followed by a pause
    of ``backoff_base * backoff_factor**i`` seconds. Other 4xx statuses are
    not retried. A response that decodes but violates the wire contract
    raises :class:`ProtocolError` immediately.
    """
    if retries < 1:
        raise ValidationError("retries must be >= 1")
    last: Exception | None = None
    for attempt in range(retries):
        try:
            resp = client.post(url, json=request, headers=headers)
        except httpx.HTTPError as exc:
            last = exc
        else:
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"{url}: HTTP {resp.status_code}")
            elif resp.status_code >= 400:
                raise TransportError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
            else:
                try:
                    body = resp.json()
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    raise ProtocolError(f"{url}: response is not JSON", field="<body>") from exc
                return validate_response(kind, request, body)
        if attempt < retries - 1:
            delay = backoff_base * backoff_factor**attempt
            log.warning("%s attempt %d/%d failed (%s); retrying in %.2fs", kind, attempt + 1, retries, last, delay)
            sleep(delay)
    raise TransportError(f"{url}: {kind} failed after {retries} attempts: {last}")


class HttpBackend:
    """JSON-over-HTTP client for all three services.

    ``base_url`` is the server root; the call kind is appended as the path.
    """

    def __init__(
        self,
        base_url: str,
        *,
        retries: int = 3,
        backoff_base: float = 0.5,
        backoff_factor: float = 2.0,
        timeout: float = 60.0,
        batch_size: int = BATCH_CAP,
        token: str | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.batch_size = max(1, min(batch_size, BATCH_CAP))
        self.headers = {"Authorization": f"Bearer {token}"} if token else None
        self.sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def call(self, kind: str, request: dict[str, Any]) -> dict[str, Any]:
        return remote_call(
            self._client,
            f"{self.base_url}/{kind}",
            kind,
            request,
            retries=self.retries,
            backoff_base=self.backoff_base,
            backoff_factor=self.backoff_factor,
            headers=self.headers,
            sleep=self.sleep,
        )

    def translate(self, texts: Sequence[str], src: str, tgt: str) -> list[str]:
        out: list[str] = []
        for i in range(0, len(texts), self.batch_size):
            chunk = list(texts[i : i + self.batch_size])
            out.extend(self.call("translate", {"src": src, "tgt": tgt, "texts": chunk})["translations"])
        return out

    def embed(self, items: Sequence[str], kind: str) -> list[list[float]]:
        out: list[list[float]] = []
        for i in range(0, len(items), self.batch_size):
            chunk = list(items[i : i + self.batch_size])
            out.extend(self.call("embed", {"kind": kind, "items": chunk})["vectors"])
        return [[float(x) for x in v] for v in out]

    def generate(self, prompt: str, image_refs: Sequence[str] = (), max_tokens: int = 64) -> str:
        if max_tokens < 1:
            raise ValidationError("max_tokens must be >= 1")
        req = {"prompt": prompt, "image_refs": list(image_refs), "max_tokens": max_tokens}
        return self.call("generate", req)["text"]

    def probe(self) -> None:
        """Fail fast if the server cannot be reached at all (any HTTP answer counts)."""
        try:
            self._client.get(self.base_url + "/", headers=self.headers, timeout=5.0)
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.base_url}: backend unreachable: {exc}") from exc


def make_backend(url: str | None, kind: str, **http_kwargs: Any) -> Any:
    """Build a backend from a URL.

    ``mock://`` selects the in-process mocks. For generation,
    ``mock://constant/<text>`` always answers ``<text>``.
    """
    if not url:
        raise ValidationError(f"no {kind} backend configured (set it in the config, M3_{kind.upper()}_URL, or the CLI)")
    if url.startswith("mock:"):
        if kind == "translate":
            return MockTranslator()
        if kind == "embed":
            return MockEmbedder()
        if kind == "generate":
            rest = url[len("mock://") :] if url.startswith("mock://") else ""
            if rest.startswith("constant/"):
                return constant_generator(rest[len("constant/") :])
            raise ValidationError("mock generation backend must be mock://constant/<answer>")
        raise ValueError(kind)
    if not url.startswith(("http://", "https://")):
        raise ValidationError(f"unsupported backend URL {url!r}")
    http_kwargs.setdefault("token", os.environ.get("M3_API_TOKEN"))
    return HttpBackend(url, **http_kwargs)


# --------------------------------------------------------------------------
# a tiny server exposing the mocks over the wire protocol


def _mock_handler(generator: Generator) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, format: str, *args: Any) -> None:
            log.debug("mock server: " + format, *args)

        def do_GET(self) -> None:
            self._send(200, {"status": "ok"})

        def do_POST(self) -> None:
            length = int(self.headers.get("Content-Length", 0))
            try:
                req = json.loads(self.rfile.read(length) or b"{}")
                if self.path == "/translate":
                    body = {"translations": [mock_translate(t, req["src"], req["tgt"]) for t in req["texts"]]}
                elif self.path == "/embed":
                    body = {"vectors": [mock_embed(x, req["kind"]) for x in req["items"]]}
                elif self.path == "/generate":
                    body = {"text": generator.generate(req["prompt"], req.get("image_refs", ()), req.get("max_tokens", 64))}
                else:
                    self._send(404, {"error": f"no such endpoint {self.path}"})
                    return
            except (KeyError, ValueError, ValidationError) as exc:
                self._send(400, {"error": str(exc)})
                return
            self._send(200, body)

        def _send(self, status: int, body: dict[str, Any]) -> None:
            data = json.dumps(body, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return Handler


def serve_mock(host: str = "127.0.0.1", port: int = 0, generator: Generator | None = None) -> ThreadingHTTPServer:
    """Start the mock backends on a background thread; call ``shutdown()`` to stop."""
    server = ThreadingHTTPServer((host, port), _mock_handler(generator or constant_generator("A")))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
