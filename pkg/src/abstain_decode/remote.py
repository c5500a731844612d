"""Adapter for a model served behind the logits wire contract.

Handshake request ``{"want": "handshake"}`` answers ``{"vocab_size",
"eos_id", "max_context_tokens"}`` and optionally ``"tokens"`` (the
vocabulary strings, enabling local tokenization). Logit requests are
``{"request_id", "prefix_token_ids", "want": "logits"}`` and answer
``{"request_id", "logits"}``.
"""

from __future__ import annotations

import itertools
import json
import threading
import time
import urllib.error
import urllib.request
from typing import Callable, Protocol

import numpy as np

from .backend import Backend, BackendCapabilities, Vocabulary
from .errors import CapacityError, InvalidArgumentError, TransportError
from .prompts import RenderedPrompt

BACKEND_ENV = "ABSTAIN_DECODE_BACKEND"

Transport = Callable[[dict], dict]


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[int]: ...

    def detokenize(self, ids) -> str: ...


class HttpTransport:
    """POSTs JSON to one URL, retrying connection failures with backoff."""

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def __call__(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        last: Exception | None = None
        for attempt in range(1, self.retries + 1):
            req = urllib.request.Request(
                self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                # 4xx will not improve on retry
                if exc.code < 500:
                    raise TransportError(f"{self.url}: HTTP {exc.code}", attempts=attempt, retryable=False) from exc
                last = exc
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last = exc
            if attempt < self.retries:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(f"{self.url}: {last}", attempts=self.retries, retryable=True)


class RemoteBackend(Backend):
    def __init__(self, transport: Transport, tokenizer: Tokenizer | None = None, concurrent_safe: bool = False):
        self.transport = transport
        info = transport({"want": "handshake"})
        try:
            vocab_size = int(info["vocab_size"])
            eos_id = int(info["eos_id"])
            max_ctx = int(info["max_context_tokens"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed handshake: {info!r}", retryable=False) from exc
        if "tokens" in info:
            self.vocab = Vocabulary(info["tokens"], eos_id)
            if len(self.vocab) != vocab_size:
                raise TransportError("handshake token list disagrees with vocab_size", retryable=False)
        else:
            self.vocab = None  # type: ignore[assignment]
        if tokenizer is None and self.vocab is None:
            raise InvalidArgumentError("remote backend sent no vocabulary; pass a tokenizer")
        self._tokenizer = tokenizer or self.vocab
        self._vocab_size = vocab_size
        self._eos_id = eos_id
        self.capabilities = BackendCapabilities(concurrent_safe=concurrent_safe, max_context_tokens=max_ctx)
        self._ids = itertools.count()
        self._id_lock = threading.Lock()

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    @property
    def eos_id(self) -> int:
        return self._eos_id

    def tokenize(self, text: str) -> list[int]:
        return self._tokenizer.tokenize(text)

    def detokenize(self, ids) -> str:
        return self._tokenizer.detokenize([i for i in ids if i != self._eos_id])

    def logits(self, prompt: RenderedPrompt) -> np.ndarray:
        ids = self.tokenize(prompt.text)
        if len(ids) > self.capabilities.max_context_tokens:
            raise CapacityError(f"prompt of {len(ids)} tokens exceeds {self.capabilities.max_context_tokens}")
        with self._id_lock:
            request_id = f"r{next(self._ids)}"
        resp = self.transport({"request_id": request_id, "prefix_token_ids": ids, "want": "logits"})
        if resp.get("request_id") != request_id:
            raise TransportError(f"response id {resp.get('request_id')!r} != {request_id!r}", retryable=True)
        try:
            arr = np.asarray(resp["logits"], dtype=np.float32).astype(np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError("response carries no usable logits", retryable=False) from exc
        if arr.shape != (self._vocab_size,) or not np.all(np.isfinite(arr)):
            raise TransportError(f"logits of shape {arr.shape} (finite={np.all(np.isfinite(arr))})", retryable=False)
        return arr
