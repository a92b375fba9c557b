import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from fedmem.llmclient import (
    INSUFFICIENT,
    GenRequest,
    GenerationError,
    HttpBackend,
    ScriptedBackend,
    prompt_key,
    render_qa_prompt,
    render_rag_prompt,
)

GOLDEN = Path(__file__).parent / "golden"


def test_qa_prompt_matches_golden():
    prompt = render_qa_prompt(
        facts=[("acme corp", "ORG"), ("berlin", "LOC")],
        contexts=["Acme Corp operates in Berlin."],
        question_type="org",
    )
    assert prompt == (GOLDEN / "qa_prompt.txt").read_text(encoding="utf-8")


def test_rag_prompt_matches_golden():
    prompt = render_rag_prompt(
        "Where does Acme Corp operate?",
        [("what organization is mentioned in this passage about acme corp?", "acme corp")],
        [("s0", ["Acme Corp operates in Berlin."], [("acme corp", "ORG")])],
    )
    assert prompt == (GOLDEN / "rag_prompt.txt").read_text(encoding="utf-8")


def test_qa_prompt_renders_empty_facts_section():
    prompt = render_qa_prompt([], ["some context"], "term")
    assert "Extracted Facts:\n\n" in prompt


def test_qa_prompt_requires_contexts():
    with pytest.raises(ValueError):
        render_qa_prompt([("a", "TERM")], [], "term")


def test_prompt_rendering_byte_stable():
    args = dict(facts=[("x", "TERM")], contexts=["ctx"], question_type="term")
    assert render_qa_prompt(**args) == render_qa_prompt(**args)


def test_rag_prompt_evidence_order_matters():
    ev1 = [("e1", ["one"], []), ("e2", ["two"], [])]
    ev2 = [("e2", ["two"], []), ("e1", ["one"], [])]
    assert render_rag_prompt("q", [], ev1) != render_rag_prompt("q", [], ev2)


def test_rag_prompt_well_formed_with_empty_evidence():
    prompt = render_rag_prompt("q", [], [])
    assert "Question: q" in prompt
    assert prompt.endswith("Answer:")


def test_scripted_backend_deterministic():
    backend = ScriptedBackend()
    req = GenRequest(prompt=render_qa_prompt([("paris", "LOC")], ["In Paris."], "loc"),
                     tag="qa_synthesis")
    assert backend.generate(req).text == backend.generate(req).text


def test_scripted_backend_table_lookup():
    prompt = render_rag_prompt("q", [], [])
    backend = ScriptedBackend({prompt_key("rag_answer", prompt): "canned"})
    resp = backend.generate(GenRequest(prompt=prompt, tag="rag_answer"))
    assert resp.text == "canned"


def test_scripted_qa_default_emits_template_pairs():
    prompt = render_qa_prompt([("acme corp", "ORG")], ["Acme Corp operates."], "org")
    resp = ScriptedBackend().generate(GenRequest(prompt=prompt, tag="qa_synthesis"))
    assert "Question: what organization is mentioned in this passage about acme corp?" in resp.text
    assert "Answer: acme corp" in resp.text


def test_scripted_rag_default_grounded_reference():
    prompt = render_rag_prompt(
        "who advises acme corp?",
        [("q1", "dr grace hopper"), ("q2", "someone else")],
        [("s0", ["Dr. Grace Hopper advises Acme Corp."], [])],
    )
    resp = ScriptedBackend().generate(GenRequest(prompt=prompt, tag="rag_answer"))
    assert resp.text == "dr grace hopper"


def test_scripted_rag_default_insufficient_without_evidence():
    prompt = render_rag_prompt("q", [("other", "unrelated answer")], [])
    resp = ScriptedBackend().generate(GenRequest(prompt=prompt, tag="rag_answer"))
    assert resp.text == INSUFFICIENT


def test_gen_request_validation():
    with pytest.raises(ValueError):
        GenRequest(prompt="", tag="rag_answer")
    with pytest.raises(ValueError):
        GenRequest(prompt="x", tag="bogus")
    with pytest.raises(ValueError):
        GenRequest(prompt="x", tag="rag_answer", temperature=-1)


class _ChatStub(BaseHTTPRequestHandler):
    failures = 0
    requests_seen = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        _ChatStub.requests_seen.append(body)
        if _ChatStub.failures > 0:
            _ChatStub.failures -= 1
            self.send_response(503)
            self.end_headers()
            return
        payload = json.dumps({
            "choices": [{"message": {"content": "stub answer"}}],
            "usage": {"prompt_tokens": 5, "completion_tokens": 2},
        }).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def chat_server():
    server = HTTPServer(("127.0.0.1", 0), _ChatStub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _ChatStub.failures = 0
    _ChatStub.requests_seen = []
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    server.shutdown()


def test_http_backend_round_trip(chat_server):
    backend = HttpBackend(endpoint=chat_server, model="test-model", base_delay=0.01)
    resp = backend.generate(GenRequest(prompt="hello", tag="rag_answer"))
    assert resp.text == "stub answer"
    assert resp.attempts == 1
    assert resp.prompt_tokens == 5
    sent = _ChatStub.requests_seen[-1]
    assert sent["model"] == "test-model"
    assert sent["messages"] == [{"role": "user", "content": "hello"}]
    assert sent["temperature"] == 0.0


def test_http_backend_retries_transient_failures(chat_server):
    _ChatStub.failures = 2
    backend = HttpBackend(endpoint=chat_server, model="m", base_delay=0.01)
    resp = backend.generate(GenRequest(prompt="hello", tag="rag_answer"))
    assert resp.attempts == 3


def test_http_backend_exhausts_attempts(chat_server):
    _ChatStub.failures = 99
    backend = HttpBackend(endpoint=chat_server, model="m", base_delay=0.01, max_attempts=2)
    with pytest.raises(GenerationError, match="after 2 attempts") as err:
        backend.generate(GenRequest(prompt="x", tag="rag_answer"))
    assert err.value.attempts == 2
    _ChatStub.failures = 0
