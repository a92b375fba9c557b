"""End-to-end local build: segment -> embed -> learn hypergraph -> QA bank."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Document, TextUnit, segment
from .embedding import EmbeddingProviderConfig, embed_batch
from .hypergraph import TrainConfig, TrainDiagnostics, TrainedHypergraph, train
from .memory import LlmGenerator, MemoryBank, TemplateGenerator, build_bank


@dataclass
class BuildConfig:
    embedding: EmbeddingProviderConfig
    train: TrainConfig
    per_edge_budget: int = 3
    pair_cap: int | None = None  # default 2 * |edges|
    generator: str = "template"  # template | llm
    gazetteer_path: str | None = None


@dataclass
class LocalBuild:
    docs: list[Document]
    paragraphs: list[TextUnit]
    sentences: list[TextUnit]
    graph: TrainedHypergraph
    diagnostics: TrainDiagnostics
    bank: MemoryBank


def make_generator(cfg: BuildConfig, backend):
    if cfg.generator == "template":
        return TemplateGenerator()
    if cfg.generator == "llm":
        return LlmGenerator(backend)
    raise ValueError(f"unknown generator kind: {cfg.generator}")


def build_local(docs: list[Document], cfg: BuildConfig, backend,
                client_id: str | None = None) -> LocalBuild:
    paragraphs, sentences = segment(docs)
    units_by = {"paragraph": paragraphs, "sentence": sentences}
    x_by = {
        gran: embed_batch([u.text for u in units], cfg.embedding).values
        for gran, units in units_by.items()
    }
    graph, diag = train(units_by, x_by, cfg.train, cfg.gazetteer_path)
    generator = make_generator(cfg, backend)
    bank = build_bank(graph, generator, cfg.embedding, cfg.per_edge_budget,
                      cfg.pair_cap, origin_client=client_id)
    return LocalBuild(docs=docs, paragraphs=paragraphs, sentences=sentences,
                      graph=graph, diagnostics=diag, bank=bank)
