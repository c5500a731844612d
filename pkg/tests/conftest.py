from __future__ import annotations

import http.server
import json
import threading
import zlib

import numpy as np
import pytest

from abstain_decode.backend import Rule, TableLM, Vocabulary
from abstain_decode.judge import EvalInstance
from abstain_decode.prompts import TemplateKind

KNOWLEDGE_KINDS = (
    TemplateKind.PARAMETRIC,
    TemplateKind.CONTEXTUAL,
    TemplateKind.ABSTENTION,
    TemplateKind.NULL_PARAMETRIC,
    TemplateKind.NULL_CONTEXTUAL,
    TemplateKind.VERIFICATION,
)

INSTANCE = EvalInstance("i0", "Who wrote it?", "Some context.", ("gold",), True)


def random_table_world(seed: int, offset: float = 0.0, max_vocab: int = 16) -> TableLM:
    """Random Markov-style TableLM: logits depend on template kind and the last token.

    The same ``seed`` with a different ``offset`` gives the same world with a
    constant added to every logit vector.
    """
    rng = np.random.default_rng(seed)
    size = int(rng.integers(4, max_vocab + 1))
    tokens = ["</s>"] + [f" w{i}" for i in range(1, size)]
    vocab = Vocabulary(tokens, 0)
    rules = []
    for kind in KNOWLEDGE_KINDS:
        scale = rng.uniform(0.5, 4.0)
        for last in tokens[1:]:
            rules.append(Rule(rng.normal(0, scale, size) + offset, kind, (), last))
        rules.append(Rule(rng.normal(0, scale, size) + offset, kind, (), "Answer:"))
    return TableLM(vocab, rng.normal(0, 1, size) + offset, rules)


class Acceptance:
    lines: list[str] = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion."""
    name = request.node.get_closest_marker("criterion").args[0]
    yield
    outcome = getattr(request.node, "rep_call", None)
    status = "PASS" if outcome is not None and outcome.passed else "FAIL"
    Acceptance.lines.append(f"{status}  {name}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion label")


def pytest_terminal_summary(terminalreporter):
    if Acceptance.lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(Acceptance.lines, key=lambda s: int(s.split()[2].rstrip("."))):
            terminalreporter.write_line(line)


CHAR_TOKENS = ["</s>"] + [chr(c) for c in range(32, 127)] + ["\n"]


def char_logits(ids) -> list[float]:
    """Deterministic pseudo-logits over the char vocabulary for a prefix."""
    seed = zlib.crc32(",".join(map(str, ids)).encode())
    out = np.random.default_rng(seed).normal(0.0, 2.0, len(CHAR_TOKENS))
    return out.tolist()


class FakeModelServer:
    """Local HTTP endpoint speaking the remote wire format.

    ``fail_after`` makes every logits request beyond that count answer
    with ``fail_status``; ``None`` disables failure.
    """

    def __init__(self, fail_after: int | None = None, fail_status: int = 500, max_context_tokens: int = 100_000):
        self.fail_after = fail_after
        self.fail_status = fail_status
        self.max_context_tokens = max_context_tokens
        self.logit_requests = 0
        self.status_log: list[int] = []
        outer = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                status, payload = outer.respond(body)
                outer.status_log.append(status)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/"

    def respond(self, body: dict) -> tuple[int, dict]:
        if body.get("want") == "handshake":
            return 200, {
                "vocab_size": len(CHAR_TOKENS),
                "eos_id": 0,
                "max_context_tokens": self.max_context_tokens,
                "tokens": CHAR_TOKENS,
            }
        self.logit_requests += 1
        if self.fail_after is not None and self.logit_requests > self.fail_after:
            return self.fail_status, {"error": "unavailable"}
        return 200, {"request_id": body["request_id"], "logits": char_logits(body["prefix_token_ids"])}

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
