"""Dual-path query routing over a QA memory bank.

A unified score mixes embedding similarity with anchor Dice overlap. Queries
whose best match clears the confidence threshold are answered straight from
memory (no generation); the rest retrieve the top-K items, localize their
supporting hyperedges, and make exactly one generation call over the
assembled evidence.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import AnchorSet, extract_anchors
from .embedding import EmbeddingProviderConfig, embed_batch
from .hypergraph import TrainedHypergraph
from .llmclient import GenRequest, GenerationError, render_rag_prompt
from .memory import MemoryBank, QaMemoryItem

FOREIGN_SEP = ":"  # foreign support ids are namespaced "<pseudonym>:<edge id>"


class EmptyBankError(RuntimeError):
    pass


class DanglingHyperedgeError(KeyError):
    pass


@dataclass(frozen=True)
class RouteConfig:
    delta: float = 0.8
    alpha: float = 0.7
    top_k: int = 5

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.01:
            raise ValueError("delta must lie in [0, 1.01]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class Query:
    query_id: str
    question: str
    gold_answer: str | None = None
    home_client: str | None = None
    gold_docs: tuple[str, ...] = ()


@dataclass
class RouteResult:
    query_id: str
    path: str  # "fast" | "slow"
    answer: str
    best_score: float
    matched_item: str | None
    retrieved_items: list[str] = field(default_factory=list)
    localized_hyperedges: list[str] = field(default_factory=list)
    llm_calls: int = 0
    latency_s: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "path": self.path,
            "answer": self.answer,
            "best_score": self.best_score,
            "matched_item": self.matched_item,
            "retrieved_items": self.retrieved_items,
            "localized_hyperedges": self.localized_hyperedges,
            "llm_calls": self.llm_calls,
            "latency_s": self.latency_s,
            "error": self.error,
        }


def cover(query_anchors: AnchorSet | frozenset, item_anchors: AnchorSet | frozenset) -> float:
    """Dice overlap of the two anchor sets; both empty gives 0."""
    a = set(query_anchors)
    b = set(item_anchors)
    if not a and not b:
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def score(q_embedding: np.ndarray, q_anchors: AnchorSet | frozenset,
          item: QaMemoryItem, alpha: float) -> float:
    """alpha * clamped cosine + (1 - alpha) * Dice, always in [0, 1]."""
    sim = max(0.0, float(np.clip(np.dot(q_embedding, item.q_embedding), -1.0, 1.0)))
    return alpha * sim + (1.0 - alpha) * cover(q_anchors, item.anchors)


def score_all(q_embedding: np.ndarray, q_anchors: AnchorSet | frozenset,
              bank: MemoryBank, alpha: float) -> np.ndarray:
    if not bank.items:
        return np.zeros(0)
    sims = np.clip(bank.index @ q_embedding, -1.0, 1.0)
    sims = np.maximum(sims, 0.0)
    covers = np.array([cover(q_anchors, it.anchors) for it in bank.items])
    return alpha * sims + (1.0 - alpha) * covers


def best_match(q_embedding: np.ndarray, q_anchors, bank: MemoryBank,
               alpha: float) -> tuple[QaMemoryItem, float]:
    """Arg-max of the unified score; ties go to the lowest item id."""
    if not bank.items:
        raise EmptyBankError("memory bank is empty")
    scores = score_all(q_embedding, q_anchors, bank, alpha)
    best_idx = 0
    for i in range(1, len(bank.items)):
        if scores[i] > scores[best_idx] or (
            scores[i] == scores[best_idx]
            and bank.items[i].item_id < bank.items[best_idx].item_id
        ):
            best_idx = i
    return bank.items[best_idx], float(scores[best_idx])


def top_k(q_embedding: np.ndarray, q_anchors, bank: MemoryBank, alpha: float,
          k: int) -> list[tuple[QaMemoryItem, float]]:
    scores = score_all(q_embedding, q_anchors, bank, alpha)
    order = sorted(range(len(bank.items)),
                   key=lambda i: (-scores[i], bank.items[i].item_id))
    return [(bank.items[i], float(scores[i])) for i in order[:k]]


def is_foreign(hyperedge_id: str) -> bool:
    return FOREIGN_SEP in hyperedge_id


def localize(topk_items: list[QaMemoryItem], graph: TrainedHypergraph | None
             ) -> list[str]:
    """Union of support ids ordered by first appearance in the ranking.

    Local ids that do not resolve against the hypergraph are a hard error
    (bank/hypergraph mismatch); namespaced foreign ids pass through.
    """
    if not topk_items:
        raise ValueError("localize requires at least one item")
    seen: set[str] = set()
    ordered: list[str] = []
    for item in topk_items:
        for edge_id in item.support_ids:
            if edge_id in seen:
                continue
            if not is_foreign(edge_id) and (graph is None or edge_id not in graph):
                raise DanglingHyperedgeError(
                    f"support id {edge_id!r} does not resolve to a hyperedge"
                )
            seen.add(edge_id)
            ordered.append(edge_id)
    return ordered


def route(query: Query, bank: MemoryBank, graph: TrainedHypergraph | None,
          config: RouteConfig, backend, provider: EmbeddingProviderConfig) -> RouteResult:
    """Route one query: fast memory hit if the best score clears delta, else
    one evidence-grounded generation call."""
    start = time.perf_counter()
    q_emb = embed_batch([query.question], provider).values[0]
    q_anchors = extract_anchors(query.question)

    if not bank.items:
        result = _slow_path(query, [], [], config, backend, 0.0, None)
        result.latency_s = time.perf_counter() - start
        return result

    best_item, best = best_match(q_emb, q_anchors, bank, config.alpha)
    if best >= config.delta:
        return RouteResult(
            query_id=query.query_id,
            path="fast",
            answer=best_item.answer,
            best_score=best,
            matched_item=best_item.item_id,
            llm_calls=0,
            latency_s=time.perf_counter() - start,
        )

    ranked = top_k(q_emb, q_anchors, bank, config.alpha, config.top_k)
    localized = localize([it for it, _ in ranked], graph)
    evidence = []
    for edge_id in localized:
        if is_foreign(edge_id):
            continue  # foreign hyperedges never ship contexts
        edge = graph.get(edge_id)
        evidence.append((edge_id, list(edge.contexts),
                         [(f.span, f.fact_type) for f in edge.facts]))
    result = _slow_path(query, ranked, evidence, config, backend, best,
                        best_item.item_id)
    result.retrieved_items = [it.item_id for it, _ in ranked]
    result.localized_hyperedges = localized
    result.latency_s = time.perf_counter() - start
    return result


def _slow_path(query: Query, ranked, evidence, config: RouteConfig, backend,
               best: float, matched: str | None) -> RouteResult:
    prompt = render_rag_prompt(
        query.question,
        [(it.question, it.answer) for it, _ in ranked],
        evidence,
    )
    try:
        resp = backend.generate(GenRequest(prompt=prompt, tag="rag_answer"))
        answer, error = resp.text.strip(), None
    except GenerationError as exc:
        answer, error = "", f"generation failed: {exc}"
    return RouteResult(
        query_id=query.query_id,
        path="slow",
        answer=answer,
        best_score=best,
        matched_item=matched,
        llm_calls=1,
        error=error,
    )


# ---------------------------------------------------------------------------
# Query file IO (JSONL)


def read_queries_jsonl(path: str | Path) -> list[Query]:
    queries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            queries.append(
                Query(
                    query_id=obj["query_id"],
                    question=obj["question"],
                    gold_answer=obj.get("gold_answer"),
                    home_client=obj.get("home_client"),
                    gold_docs=tuple(obj.get("gold_docs", ())),
                )
            )
    return queries


def write_results_jsonl(results: list[RouteResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps(res.to_dict(), sort_keys=True))
            fh.write("\n")
