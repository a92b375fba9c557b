"""Hyperedge-grounded QA memory: synthesis, cross-edge composition, bank store.

Two generators ship side by side: a deterministic template generator (the
hermetic default — the routing math consumes the bank's *structure*, not its
prose) and an LLM-backed generator that renders the synthesis prompt and
parses Question/Answer lines from the reply. Both pass through the same
grounding filter: an item whose answer does not occur in its supporting
contexts is dropped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from itertools import combinations
from pathlib import Path

import numpy as np

from .corpus import normalize, sort_facts
from .embedding import EmbeddingProviderConfig, embed_batch
from .hypergraph import Hyperedge, TrainedHypergraph
from .llmclient import GenRequest, render_qa_prompt

log = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def load_templates() -> dict:
    text = resources.files("fedmem.data").joinpath("qa_templates.json").read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class QaMemoryItem:
    item_id: str
    question: str
    answer: str
    support_ids: tuple[str, ...]
    origin_hyperedge_id: str
    origin_client: str | None
    anchors: frozenset[str]
    q_embedding: np.ndarray

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ValueError("question and answer must be non-empty")
        if self.origin_hyperedge_id not in self.support_ids:
            raise ValueError("origin hyperedge must be one of the supports")

    @property
    def is_multihop(self) -> bool:
        return len(self.support_ids) > 1


@dataclass
class MemoryBank:
    items: list[QaMemoryItem]
    index: np.ndarray  # one q_embedding row per item
    provenance: str = ""

    def __post_init__(self):
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")

    def __len__(self) -> int:
        return len(self.items)

    def counts(self) -> dict[str, int]:
        multi = sum(1 for it in self.items if it.is_multihop)
        return {"total": len(self.items), "fact_level": len(self.items) - multi,
                "multi_hop": multi}


# ---------------------------------------------------------------------------
# Generators


class TemplateGenerator:
    """Deterministic table-driven QA generation from typed facts."""

    def __init__(self, templates: dict | None = None):
        self.templates = templates or load_templates()

    def for_edge(self, edge: Hyperedge, budget: int) -> list[tuple[str, str]]:
        pairs = []
        seen: set[str] = set()
        for fact in sort_facts(list(edge.facts)):
            if fact.span in seen:
                continue
            seen.add(fact.span)
            question = self.templates["per_edge"].format(
                typeword=self.templates["typewords"][fact.fact_type], span=fact.span
            )
            pairs.append((question, fact.span))
            if len(pairs) >= budget:
                break
        return pairs

    def bridge(self, edge_a: Hyperedge, edge_b: Hyperedge, shared: str
               ) -> list[tuple[str, str]]:
        """One item per direction: anchor fact from one edge, answer fact from
        the other, joined through the shared anchor."""
        pairs = []
        for src, dst in ((edge_a, edge_b), (edge_b, edge_a)):
            first = next((f for f in sort_facts(list(src.facts)) if f.span != shared), None)
            if first is None:
                continue
            second = next(
                (f for f in sort_facts(list(dst.facts))
                 if f.span != shared and f.span != first.span),
                None,
            )
            if second is None:
                continue
            question = self.templates["cross_edge"].format(
                typeword=self.templates["typewords"][second.fact_type],
                span=first.span,
                shared=shared,
            )
            pairs.append((question, second.span))
        return pairs


_QA_LINE_PREFIXES = ("Question:", "Answer:")


def parse_qa_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    question = None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("Question:"):
            question = line[len("Question:"):].strip()
        elif line.startswith("Answer:") and question:
            answer = line[len("Answer:"):].strip()
            if answer:
                pairs.append((question, answer))
            question = None
    return pairs


class LlmGenerator:
    """QA synthesis through a generation backend (scripted or HTTP)."""

    def __init__(self, backend):
        self.backend = backend

    def for_edge(self, edge: Hyperedge, budget: int) -> list[tuple[str, str]]:
        facts = [(f.span, f.fact_type) for f in sort_facts(list(edge.facts))]
        qtype = facts[0][1].lower() if facts else "term"
        prompt = render_qa_prompt(facts, list(edge.contexts), qtype)
        resp = self.backend.generate(GenRequest(prompt=prompt, tag="qa_synthesis"))
        return parse_qa_pairs(resp.text)[:budget]

    def bridge(self, edge_a: Hyperedge, edge_b: Hyperedge, shared: str
               ) -> list[tuple[str, str]]:
        facts = [(f.span, f.fact_type) for f in sort_facts(list(edge_a.facts))]
        facts += [(f.span, f.fact_type) for f in sort_facts(list(edge_b.facts))]
        contexts = list(edge_a.contexts) + list(edge_b.contexts)
        prompt = render_qa_prompt(facts, contexts, f"multi_hop via {shared}")
        resp = self.backend.generate(GenRequest(prompt=prompt, tag="qa_synthesis"))
        return parse_qa_pairs(resp.text)[:2]


# ---------------------------------------------------------------------------
# Bank construction


def _grounded(answer: str, edges: list[Hyperedge]) -> bool:
    needle = " " + normalize(answer) + " "
    if needle.strip() == "":
        return False
    for edge in edges:
        for ctx in edge.contexts:
            if needle in " " + normalize(ctx) + " ":
                return True
    return False


def synthesize_for_hyperedge(edge: Hyperedge, generator, provider: EmbeddingProviderConfig,
                             budget: int = 3, origin_client: str | None = None
                             ) -> list[QaMemoryItem]:
    """Per-edge items; answers not grounded in the edge's contexts are dropped."""
    if not edge.contexts:
        raise ValueError(f"hyperedge {edge.hyperedge_id} has no contexts")
    try:
        pairs = generator.for_edge(edge, budget)
    except Exception as exc:  # noqa: BLE001 - a failing generator skips the edge
        log.warning("generator failed on %s: %s", edge.hyperedge_id, exc)
        return []
    items = []
    dropped = 0
    for k, (question, answer) in enumerate(pairs[:budget]):
        if not question or not answer:
            continue
        if not _grounded(answer, [edge]):
            dropped += 1
            continue
        emb = embed_batch([question], provider).values[0]
        items.append(
            QaMemoryItem(
                item_id=f"{edge.hyperedge_id}.q{k}",
                question=question,
                answer=answer,
                support_ids=(edge.hyperedge_id,),
                origin_hyperedge_id=edge.hyperedge_id,
                origin_client=origin_client,
                anchors=edge.anchors,
                q_embedding=emb,
            )
        )
    if dropped:
        log.info("dropped %d ungrounded item(s) for %s", dropped, edge.hyperedge_id)
    return items


def candidate_pairs(graph: TrainedHypergraph, cap: int | None = None
                    ) -> list[tuple[Hyperedge, Hyperedge, str, int]]:
    """Hyperedge pairs sharing at least one anchor, ranked by shared-anchor
    count (ties lexicographic by id pair), capped at 2*M by default."""
    if cap is None:
        cap = 2 * len(graph.hyperedges)
    scored = []
    for a, b in combinations(sorted(graph.hyperedges, key=lambda e: e.hyperedge_id), 2):
        shared = a.anchors & b.anchors
        if not shared:
            continue
        scored.append((a, b, min(shared), len(shared)))
    scored.sort(key=lambda t: (-t[3], t[0].hyperedge_id, t[1].hyperedge_id))
    return scored[:cap]


def compose_crossedge(per_edge_items: list[QaMemoryItem], graph: TrainedHypergraph,
                      generator, provider: EmbeddingProviderConfig,
                      pair_cap: int | None = None, origin_client: str | None = None
                      ) -> list[QaMemoryItem]:
    """Bridge items over anchor-sharing hyperedge pairs (supports of size 2)."""
    existing = {(normalize(it.question), normalize(it.answer)) for it in per_edge_items}
    items = []
    for edge_a, edge_b, shared, _count in candidate_pairs(graph, pair_cap):
        try:
            pairs = generator.bridge(edge_a, edge_b, shared)
        except Exception as exc:  # noqa: BLE001
            log.warning("bridge generator failed on (%s, %s): %s",
                        edge_a.hyperedge_id, edge_b.hyperedge_id, exc)
            continue
        first_id = min(edge_a.hyperedge_id, edge_b.hyperedge_id)
        for k, (question, answer) in enumerate(pairs):
            if not question or not answer:
                continue
            if (normalize(question), normalize(answer)) in existing:
                continue
            if not _grounded(answer, [edge_a, edge_b]):
                continue
            existing.add((normalize(question), normalize(answer)))
            emb = embed_batch([question], provider).values[0]
            items.append(
                QaMemoryItem(
                    item_id=f"{edge_a.hyperedge_id}+{edge_b.hyperedge_id}.x{k}",
                    question=question,
                    answer=answer,
                    support_ids=tuple(sorted((edge_a.hyperedge_id, edge_b.hyperedge_id))),
                    origin_hyperedge_id=first_id,
                    origin_client=origin_client,
                    anchors=frozenset(edge_a.anchors | edge_b.anchors),
                    q_embedding=emb,
                )
            )
    return items


def build_bank(graph: TrainedHypergraph, generator, provider: EmbeddingProviderConfig,
               budget: int = 3, pair_cap: int | None = None,
               origin_client: str | None = None) -> MemoryBank:
    """Union of per-edge and cross-edge items, ordered merge, indexed questions."""
    items: list[QaMemoryItem] = []
    for edge in graph.hyperedges:
        items.extend(synthesize_for_hyperedge(edge, generator, provider, budget,
                                              origin_client))
    items.extend(compose_crossedge(items, graph, generator, provider, pair_cap,
                                   origin_client))
    if items:
        index = np.stack([it.q_embedding for it in items])
    else:
        index = np.zeros((0, provider.dim))
    prov = hashlib.sha256(
        json.dumps({"budget": budget, "dim": provider.dim, "kind": provider.kind,
                    "seed": provider.seed}, sort_keys=True).encode()
    ).hexdigest()[:16]
    return MemoryBank(items=items, index=index, provenance=prov)


# ---------------------------------------------------------------------------
# Persistence: JSON bank + sibling binary embedding file keyed by item id


_EMB_MAGIC = b"QEMB"


def save_embeddings(path: str | Path, ids: list[str], vectors: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", vectors.shape[1] if vectors.size else 0, len(ids)))
        for item_id, vec in zip(ids, vectors):
            raw = item_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f8").tobytes())


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding sidecar file")
        dim, count = struct.unpack("<II", fh.read(8))
        out = {}
        for _ in range(count):
            (id_len,) = struct.unpack("<H", fh.read(2))
            item_id = fh.read(id_len).decode("utf-8")
            vec = np.frombuffer(fh.read(8 * dim), dtype="<f8").copy()
            out[item_id] = vec
    return out


def bank_to_dict(bank: MemoryBank) -> dict:
    return {
        "items": [
            {
                "id": it.item_id,
                "question": it.question,
                "answer": it.answer,
                "support": list(it.support_ids),
                "origin": it.origin_hyperedge_id,
                "client": it.origin_client,
                "anchors": sorted(it.anchors),
            }
            for it in bank.items
        ],
        "embedding_dim": int(bank.index.shape[1]) if bank.index.size else 0,
    }


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bank_to_dict(bank), fh, sort_keys=True, indent=1)
        fh.write("\n")
    save_embeddings(path.with_suffix(".emb"), [it.item_id for it in bank.items], bank.index)


def load_bank(path: str | Path) -> MemoryBank:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    embs = load_embeddings(path.with_suffix(".emb"))
    items = []
    for rec in data["items"]:
        items.append(
            QaMemoryItem(
                item_id=rec["id"],
                question=rec["question"],
                answer=rec["answer"],
                support_ids=tuple(rec["support"]),
                origin_hyperedge_id=rec["origin"],
                origin_client=rec.get("client"),
                anchors=frozenset(rec["anchors"]),
                q_embedding=embs[rec["id"]],
            )
        )
    index = np.stack([it.q_embedding for it in items]) if items else \
        np.zeros((0, data.get("embedding_dim", 0)))
    return MemoryBank(items=items, index=index)


def with_items(bank: MemoryBank, items: list[QaMemoryItem]) -> MemoryBank:
    index = np.stack([it.q_embedding for it in items]) if items else \
        np.zeros((0, bank.index.shape[1] if bank.index.size else 0))
    return MemoryBank(items=items, index=index, provenance=bank.provenance)


def pseudonymize(client_id: str, seed: int) -> str:
    return hashlib.sha256(f"{seed}:{client_id}".encode()).hexdigest()[:12]


def replace_item(item: QaMemoryItem, **changes) -> QaMemoryItem:
    return replace(item, **changes)
