"""Epsilon-LDP randomized response over semantic candidate sets.

A sensitive span is kept with probability e^eps / (e^eps + c - 1) and
otherwise swapped for one of its c-1 nearest same-type vocabulary neighbours,
drawn uniformly. Within one memory item every occurrence of a span receives
the same draw (an inconsistent Q/A pair would be useless); across items the
draws are independent. The candidate vocabulary comes from the local
hypergraph's typed facts only, so no raw data leaves the device to build it.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import normalize
from .embedding import EmbeddingProviderConfig, embed_batch
from .hypergraph import TrainedHypergraph
from .memory import MemoryBank, QaMemoryItem, pseudonymize, with_items

EPS_CAP = 50.0  # keeps e^eps finite; beyond this the mechanism is a no-op anyway

DEFAULT_SENSITIVE = ("PERSON", "ORG", "LOC")


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class LdpConfig:
    epsilon: float = 1.0
    candidates: int = 5  # |W|, original included
    sensitive_types: tuple[str, ...] = DEFAULT_SENSITIVE
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.candidates < 2:
            raise ValueError("candidate set size must be >= 2")


@dataclass(frozen=True)
class CandidateSet:
    original: str
    alternatives: tuple[str, ...]

    def __post_init__(self):
        if self.original in self.alternatives:
            raise ValueError("alternatives must not contain the original")
        if len(set(self.alternatives)) != len(self.alternatives):
            raise ValueError("alternatives must be distinct")

    @property
    def members(self) -> tuple[str, ...]:
        return (self.original,) + self.alternatives


@dataclass(frozen=True)
class PerturbationEvent:
    item_id: str
    fact_type: str
    original: str
    surrogate: str

    @property
    def kept(self) -> bool:
        return self.original == self.surrogate


@dataclass
class AnonymizationAudit:
    epsilon: float
    candidates: int
    sensitive_spans: int = 0
    perturbed_spans: int = 0
    # in-memory ground truth for the restoration audit; never serialized
    events: list[PerturbationEvent] = field(default_factory=list)

    def to_sidecar(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "c": self.candidates,
            "sensitive_span_count": self.sensitive_spans,
            "perturbed_span_count": self.perturbed_spans,
        }

    def save_sidecar(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_sidecar(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def keep_probability(epsilon: float, c: int) -> float:
    e_eps = math.exp(min(epsilon, EPS_CAP))
    return e_eps / (e_eps + c - 1)


def mechanism_table(epsilon: float, c: int) -> np.ndarray:
    """Row i: output distribution when the input is candidate i."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if c < 2:
        raise ValueError("c must be >= 2")
    e_eps = math.exp(min(epsilon, EPS_CAP))
    denom = e_eps + c - 1
    table = np.full((c, c), 1.0 / denom)
    np.fill_diagonal(table, e_eps / denom)
    return table


def perturb(entity: str, candidate_set: CandidateSet, epsilon: float,
            rng: np.random.Generator) -> str:
    """One randomized-response draw."""
    members = candidate_set.members
    if entity not in members:
        raise ValueError("entity must belong to its candidate set")
    if rng.random() < keep_probability(epsilon, len(members)):
        return entity
    others = [m for m in members if m != entity]
    return others[int(rng.integers(len(others)))]


def build_candidates(entity: str, fact_type: str, vocab: dict[str, list[str]],
                     c: int, provider: EmbeddingProviderConfig,
                     vocab_embeddings: dict[str, np.ndarray] | None = None
                     ) -> CandidateSet:
    """c-1 nearest same-type vocabulary entries by embedding cosine.

    Ties break lexicographically. ``vocab_embeddings`` lets callers reuse a
    precomputed embedding table for the whole vocabulary.
    """
    pool = [v for v in vocab.get(fact_type, []) if v != entity]
    if len(pool) < c - 1:
        raise VocabularyError(
            f"vocabulary for type {fact_type} has {len(pool)} alternatives, need {c - 1}"
        )
    if vocab_embeddings is None:
        mats = embed_batch(pool + [entity], provider).values
        pool_vecs, target = mats[:-1], mats[-1]
    else:
        pool_vecs = np.stack([vocab_embeddings[v] for v in pool])
        target = vocab_embeddings.get(entity)
        if target is None:
            target = embed_batch([entity], provider).values[0]
    sims = pool_vecs @ target
    order = sorted(range(len(pool)), key=lambda i: (-sims[i], pool[i]))
    return CandidateSet(original=entity, alternatives=tuple(pool[i] for i in order[: c - 1]))


# ---------------------------------------------------------------------------
# Whole-token replacement helpers

_PUNCT_EDGE_RE = re.compile(r"^(\W*)(.*?)(\W*)$", re.S)


def replace_span(text: str, span_norm: str, surrogate: str) -> str:
    """Replace every whole-token occurrence of a normalized span in raw text,
    preserving boundary punctuation."""
    span_tokens = span_norm.split()
    if not span_tokens:
        return text
    raw_tokens = text.split()
    norm_tokens = [normalize(tok) for tok in raw_tokens]
    out = []
    i = 0
    n = len(span_tokens)
    while i < len(raw_tokens):
        if norm_tokens[i : i + n] == span_tokens:
            lead = _PUNCT_EDGE_RE.match(raw_tokens[i]).group(1)
            tail = _PUNCT_EDGE_RE.match(raw_tokens[i + n - 1]).group(3)
            out.append(lead + surrogate + tail)
            i += n
        else:
            out.append(raw_tokens[i])
            i += 1
    return " ".join(out)


def _contains_span(text_norm: str, span: str) -> bool:
    return f" {span} " in f" {text_norm} "


def _item_rng(seed: int, item_id: str) -> np.random.Generator:
    digest = hashlib.sha256(item_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "big")])


def sensitive_spans_for_item(item: QaMemoryItem, graph: TrainedHypergraph,
                             sensitive_types: tuple[str, ...]) -> list[tuple[str, str]]:
    """(span, type) pairs from the item's supporting facts that actually occur
    in the item's question, answer or anchors."""
    q_norm = normalize(item.question)
    a_norm = normalize(item.answer)
    found: dict[str, str] = {}
    for edge_id in item.support_ids:
        if edge_id not in graph:
            continue
        for fact in graph.get(edge_id).facts:
            if fact.fact_type not in sensitive_types or fact.span in found:
                continue
            in_anchor = any(_contains_span(anchor, fact.span) for anchor in item.anchors)
            if in_anchor or _contains_span(q_norm, fact.span) or _contains_span(a_norm, fact.span):
                found[fact.span] = fact.fact_type
    return sorted(found.items())


def anonymize(bank: MemoryBank, config: LdpConfig, graph: TrainedHypergraph,
              provider: EmbeddingProviderConfig) -> tuple[MemoryBank, AnonymizationAudit]:
    """Perturb sensitive spans once per (item, span) and substitute the draw
    consistently across question, answer and anchors; re-embed questions;
    pseudonymize the client id. Item count, ids and supports never change."""
    vocab = graph.fact_vocabulary()
    all_entities = sorted({v for t in config.sensitive_types for v in vocab.get(t, [])})
    vocab_embeddings: dict[str, np.ndarray] = {}
    if all_entities:
        mats = embed_batch(all_entities, provider).values
        vocab_embeddings = {e: mats[i] for i, e in enumerate(all_entities)}

    audit = AnonymizationAudit(epsilon=config.epsilon, candidates=config.candidates)
    new_items: list[QaMemoryItem] = []
    for item in bank.items:
        spans = sensitive_spans_for_item(item, graph, config.sensitive_types)
        audit.sensitive_spans += len(spans)
        rng = _item_rng(config.seed, item.item_id)
        question, answer = item.question, item.answer
        anchors = set(item.anchors)
        changed = False
        for span, ftype in spans:
            cand = build_candidates(span, ftype, vocab, config.candidates, provider,
                                    vocab_embeddings)
            surrogate = perturb(span, cand, config.epsilon, rng)
            audit.events.append(PerturbationEvent(item.item_id, ftype, span, surrogate))
            if surrogate == span:
                continue
            audit.perturbed_spans += 1
            changed = True
            question = replace_span(question, span, surrogate)
            answer = replace_span(answer, span, surrogate)
            anchors = {normalize(replace_span(anchor, span, surrogate)) for anchor in anchors}
        client = pseudonymize(item.origin_client, config.seed) if item.origin_client else None
        if changed:
            q_emb = embed_batch([question], provider).values[0]
        else:
            q_emb = item.q_embedding
        new_items.append(
            QaMemoryItem(
                item_id=item.item_id,
                question=question,
                answer=answer,
                support_ids=item.support_ids,
                origin_hyperedge_id=item.origin_hyperedge_id,
                origin_client=client,
                anchors=frozenset(anchors),
                q_embedding=q_emb,
            )
        )
    return with_items(bank, new_items), audit
