"""Text-generation interface: a deterministic scripted backend for hermetic
runs and an OpenAI-style chat-completion client for real deployments.

This module also owns the two prompts the pipeline uses — QA synthesis during
memory construction and evidence-grounded answering on the slow path — so the
exact wire bytes live in one place.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .corpus import normalize

TAGS = ("qa_synthesis", "rag_answer")

INSUFFICIENT = "insufficient evidence"


class GenerationError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class GenRequest:
    prompt: str
    tag: str
    max_tokens: int = 256
    temperature: float = 0.0
    stop: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag: {self.tag}")


@dataclass
class GenResponse:
    text: str
    prompt_tokens: int
    output_tokens: int
    latency_s: float
    attempts: int = 1


QA_EXAMPLE = (
    "Question: what organization is mentioned in this passage about acme corp?\n"
    "Answer: acme corp"
)

_QA_PROMPT = """Role:
You are a question writer for a retrieval memory system.

Task:
Write question-answer pairs that can be answered using only the facts and the passage below. When the facts allow it, prefer questions that need more than one fact (comparison, aggregation, or multi-hop).

Requirements:
Use only the facts and the passage; add nothing external.
Make each question specific and unambiguous.
Each answer must be a span that appears in the passage or in the facts.

Output Format (follow this format strictly):
Example:
{example}

Question Type:
{type}
Extracted Facts:
{extracted_facts}
Original Text:
{text}"""

_RAG_PROMPT = """Answer the final question using the reference question-answer pairs and the context document below. Only output the final answer, without any explanation or additional content.

Reference Q&A Pairs: {context}
Context Document: {document}
Question: {question}
Answer:"""


def render_qa_prompt(facts: list[tuple[str, str]], contexts: list[str],
                     question_type: str, example: str = QA_EXAMPLE) -> str:
    """Fill the QA-synthesis template; byte-stable for fixed inputs."""
    if not contexts:
        raise ValueError("contexts must be non-empty")
    fact_lines = "\n".join(f"- {span} ({ftype})" for span, ftype in facts)
    return _QA_PROMPT.format(
        example=example,
        type=question_type,
        extracted_facts=fact_lines,
        text="\n".join(contexts),
    )


def render_rag_prompt(question: str, reference_qa: list[tuple[str, str]],
                      evidence: list[tuple[str, list[str], list[tuple[str, str]]]]) -> str:
    """Fill the answering template.

    ``evidence`` is an ordered list of (hyperedge_id, contexts, facts) units;
    the order is the localization order and is meaningful.
    """
    ref_lines = "\n".join(f"Q: {q} A: {a}" for q, a in reference_qa)
    doc_parts = []
    for edge_id, contexts, facts in evidence:
        fact_str = "; ".join(f"{span} ({ftype})" for span, ftype in facts)
        doc_parts.append(f"[{edge_id}] " + " ".join(contexts) + (f" | facts: {fact_str}" if fact_str else ""))
    return _RAG_PROMPT.format(
        context=ref_lines,
        document="\n".join(doc_parts),
        question=question,
    )


def _token_count(text: str) -> int:
    return len(text.split())


def prompt_key(tag: str, prompt: str) -> str:
    digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
    return f"{tag}:{digest[:16]}"


# ---------------------------------------------------------------------------
# Scripted backend


_SECTION_RE = {
    "type": re.compile(r"Question Type:\n(.*?)\nExtracted Facts:", re.S),
    "facts": re.compile(r"Extracted Facts:\n(.*?)\nOriginal Text:", re.S),
    "text": re.compile(r"Original Text:\n(.*)\Z", re.S),
    "refs": re.compile(r"Reference Q&A Pairs: (.*?)\nContext Document: ", re.S),
    "document": re.compile(r"Context Document: (.*?)\nQuestion: ", re.S),
    "question": re.compile(r"\nQuestion: (.*?)\nAnswer:", re.S),
}
_FACT_LINE_RE = re.compile(r"^- (.*) \(([A-Z]+)\)$")
_REF_LINE_RE = re.compile(r"^Q: (.*?) A: (.*)$")


def _parse_facts(block: str) -> list[tuple[str, str]]:
    facts = []
    for line in block.splitlines():
        m = _FACT_LINE_RE.match(line.strip())
        if m:
            facts.append((m.group(1), m.group(2)))
    return facts


class ScriptedBackend:
    """Table-driven responses keyed by (tag, prompt hash), with total default
    rules so hermetic runs never block."""

    def __init__(self, table: dict[str, str] | str | Path | None = None):
        if isinstance(table, (str, Path)):
            with open(table, encoding="utf-8") as fh:
                table = json.load(fh)
        self.table = dict(table or {})

    def generate(self, req: GenRequest) -> GenResponse:
        start = time.perf_counter()
        key = prompt_key(req.tag, req.prompt)
        if key in self.table:
            text = self.table[key]
        elif req.tag == "qa_synthesis":
            text = self._default_qa(req.prompt)
        else:
            text = self._default_rag(req.prompt)
        return GenResponse(
            text=text,
            prompt_tokens=_token_count(req.prompt),
            output_tokens=_token_count(text),
            latency_s=time.perf_counter() - start,
        )

    def _default_qa(self, prompt: str) -> str:
        from .memory import load_templates  # local import to avoid a cycle

        templates = load_templates()
        m_type = _SECTION_RE["type"].search(prompt)
        m_facts = _SECTION_RE["facts"].search(prompt)
        qtype = m_type.group(1).strip() if m_type else ""
        facts = _parse_facts(m_facts.group(1)) if m_facts else []
        if not facts:
            return ""
        lines = []
        if qtype.startswith("multi_hop via "):
            shared = qtype[len("multi_hop via "):]
            pool = [f for f in facts if f[0] != shared]
            if len(pool) >= 2:
                for first, last in ((pool[0], pool[-1]), (pool[-1], pool[0])):
                    q = templates["cross_edge"].format(
                        typeword=templates["typewords"][last[1]], span=first[0], shared=shared
                    )
                    lines.append(f"Question: {q}\nAnswer: {last[0]}")
        else:
            for span, ftype in facts[:3]:
                q = templates["per_edge"].format(
                    typeword=templates["typewords"][ftype], span=span
                )
                lines.append(f"Question: {q}\nAnswer: {span}")
        return "\n".join(lines)

    def _default_rag(self, prompt: str) -> str:
        m_refs = _SECTION_RE["refs"].search(prompt)
        m_doc = _SECTION_RE["document"].search(prompt)
        doc = m_doc.group(1) if m_doc else ""
        doc_norm = " " + normalize(doc) + " "
        if m_refs:
            for line in m_refs.group(1).splitlines():
                ref = _REF_LINE_RE.match(line.strip())
                if not ref:
                    continue
                answer = ref.group(2).strip()
                if answer and " " + normalize(answer) + " " in doc_norm:
                    return answer
        return INSUFFICIENT


# ---------------------------------------------------------------------------
# HTTP backend (OpenAI-style chat completions)


class HttpBackend:
    """Chat-completion client with exponential backoff and an in-flight cap.

    Credentials come from the environment only (``api_key_env``); the endpoint
    and model are configuration.
    """

    def __init__(self, endpoint: str, model: str, api_key_env: str = "FEDMEM_API_KEY",
                 timeout: float = 60.0, max_attempts: int = 5, base_delay: float = 0.5,
                 backoff_factor: float = 2.0, max_inflight: int = 4):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.backoff_factor = backoff_factor
        self._gate = threading.Semaphore(max_inflight)

    def generate(self, req: GenRequest) -> GenResponse:
        import requests

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        if req.stop:
            payload["stop"] = list(req.stop)

        start = time.perf_counter()
        delay = self.base_delay
        last: Exception | None = None
        with self._gate:
            for attempt in range(1, self.max_attempts + 1):
                try:
                    resp = requests.post(self.endpoint, json=payload, headers=headers,
                                         timeout=self.timeout)
                    if resp.status_code >= 500:
                        raise GenerationError(f"server error {resp.status_code}", attempt)
                    resp.raise_for_status()
                    body = resp.json()
                    text = body["choices"][0]["message"]["content"]
                    usage = body.get("usage", {})
                    return GenResponse(
                        text=text,
                        prompt_tokens=usage.get("prompt_tokens", _token_count(req.prompt)),
                        output_tokens=usage.get("completion_tokens", _token_count(text)),
                        latency_s=time.perf_counter() - start,
                        attempts=attempt,
                    )
                except (KeyError, IndexError, TypeError) as exc:
                    raise GenerationError(f"malformed response body: {exc}", attempt) from exc
                except GenerationError as exc:
                    last = exc
                except Exception as exc:  # noqa: BLE001 - transport errors are retried
                    last = exc
                if attempt < self.max_attempts:
                    time.sleep(delay)
                    delay *= self.backoff_factor
        raise GenerationError(
            f"generation failed after {self.max_attempts} attempts: {last}", self.max_attempts
        )
