"""One structured config file drives every command; flags override fields.

Schema (JSON, all keys optional — defaults shown):

{
  "seed": 0,                       // pseudonym + partition fallback seed
  "embedding": {"kind": "hash", "dim": 64, "seed": 0,
                 "cache_path": null, "endpoint": null, "model": null},
  "train":     {"learning_rate": 0.05, "steps": 300, "lam": 0.6, "margin": 1.0,
                 "mu": 0.5, "smoothing": 1e-8, "m_paragraph": null,
                 "m_sentence": null, "seed": 0, "line_search": true},
  "route":     {"delta": 0.8, "alpha": 0.7, "top_k": 5},
  "ldp":       {"epsilon": 1.0, "candidates": 5,
                 "sensitive_types": ["PERSON", "ORG", "LOC"], "seed": 0} | null,
  "partition": {"clients": 5, "cross_silo_target": 0.5, "seed": 0},
  "memory":    {"per_edge_budget": 3, "pair_cap": null, "generator": "template"},
  "llm":       {"backend": "scripted", "table": null, "endpoint": null,
                 "model": null, "api_key_env": "FEDMEM_API_KEY", "timeout": 60.0},
  "gazetteer": null                // path to a one-entry-per-line location list
}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .embedding import EmbeddingProviderConfig
from .hypergraph import TrainConfig
from .inference import RouteConfig
from .llmclient import HttpBackend, ScriptedBackend
from .pipeline import BuildConfig
from .privacy import LdpConfig


class ConfigError(ValueError):
    pass


@dataclass
class PartitionConfig:
    clients: int = 5
    cross_silo_target: float = 0.5
    seed: int = 0


@dataclass
class AppConfig:
    seed: int
    embedding: EmbeddingProviderConfig
    train: TrainConfig
    route: RouteConfig
    ldp: LdpConfig | None
    partition: PartitionConfig
    per_edge_budget: int
    pair_cap: int | None
    generator: str
    llm: dict
    gazetteer: str | None

    def build_config(self) -> BuildConfig:
        return BuildConfig(
            embedding=self.embedding,
            train=self.train,
            per_edge_budget=self.per_edge_budget,
            pair_cap=self.pair_cap,
            generator=self.generator,
            gazetteer_path=self.gazetteer,
        )

    def backend(self):
        kind = self.llm.get("backend", "scripted")
        if kind == "scripted":
            return ScriptedBackend(self.llm.get("table"))
        if kind == "http":
            if not self.llm.get("endpoint"):
                raise ConfigError("llm.backend=http requires llm.endpoint")
            return HttpBackend(
                endpoint=self.llm["endpoint"],
                model=self.llm.get("model", "default"),
                api_key_env=self.llm.get("api_key_env", "FEDMEM_API_KEY"),
                timeout=self.llm.get("timeout", 60.0),
            )
        raise ConfigError(f"unknown llm backend: {kind}")


def load_config(path: str | Path | None) -> AppConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> AppConfig:
    try:
        emb = EmbeddingProviderConfig(**raw.get("embedding", {}))
        train = TrainConfig(**raw.get("train", {}))
        route = RouteConfig(**raw.get("route", {}))
        ldp_raw = raw.get("ldp")
        ldp = None
        if ldp_raw is not None:
            if "sensitive_types" in ldp_raw:
                ldp_raw = dict(ldp_raw, sensitive_types=tuple(ldp_raw["sensitive_types"]))
            ldp = LdpConfig(**ldp_raw)
        part = PartitionConfig(**raw.get("partition", {}))
        mem = raw.get("memory", {})
        return AppConfig(
            seed=raw.get("seed", 0),
            embedding=emb,
            train=train,
            route=route,
            ldp=ldp,
            partition=part,
            per_edge_budget=mem.get("per_edge_budget", 3),
            pair_cap=mem.get("pair_cap"),
            generator=mem.get("generator", "template"),
            llm=raw.get("llm", {"backend": "scripted"}),
            gazetteer=raw.get("gazetteer"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
