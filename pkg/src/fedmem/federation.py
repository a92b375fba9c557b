"""Multi-client simulation: partitioning, per-client builds, anonymized export,
global memory fusion, and evaluation rounds.

The "server" is in-process but every upload crosses a serializable JSON
boundary shaped exactly like a networked deployment would use, and exports
carry QA items and anchors only — no raw document text or hyperedge contexts
ever enter a payload.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Document
from .embedding import EmbeddingProviderConfig
from .inference import FOREIGN_SEP, Query, RouteConfig, RouteResult, route
from .memory import (
    MemoryBank,
    QaMemoryItem,
    bank_to_dict,
    pseudonymize,
    with_items,
)
from .corpus import normalize
from .pipeline import BuildConfig, LocalBuild, build_local
from .privacy import AnonymizationAudit, LdpConfig, anonymize

log = logging.getLogger(__name__)

EXPORT_SCHEMA_VERSION = 1


class PartitionError(ValueError):
    pass


class ExportSchemaError(ValueError):
    pass


@dataclass
class PartitionSpec:
    clients: int
    seed: int
    assignment: dict[str, str]  # doc_id -> client_id
    labels: dict[str, str]  # query_id -> "local" | "cross_silo"
    home: dict[str, str]  # query_id -> client_id
    target_cross_fraction: float
    achieved_cross_fraction: float

    def client_ids(self) -> list[str]:
        return [f"c{i}" for i in range(self.clients)]

    def docs_for(self, client_id: str) -> list[str]:
        return sorted(d for d, c in self.assignment.items() if c == client_id)

    def to_dict(self) -> dict:
        return {
            "clients": self.clients,
            "seed": self.seed,
            "assignment": self.assignment,
            "labels": self.labels,
            "home": self.home,
            "target_cross_fraction": self.target_cross_fraction,
            "achieved_cross_fraction": self.achieved_cross_fraction,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "PartitionSpec":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def partition(docs: list[Document], queries: list[Query], k: int,
              cross_silo_target: float = 0.5, seed: int = 0) -> PartitionSpec:
    """Greedy seeded assignment: size balance within one doc, then steer the
    realized cross-silo query fraction toward the target where feasible.

    Documents with an explicit client hint are honored first. An infeasible
    target is reported through ``achieved_cross_fraction`` rather than raised.
    """
    if k < 1:
        raise PartitionError("need at least one client")
    for q in queries:
        if not q.gold_docs:
            raise PartitionError(f"query {q.query_id} lists no gold docs")
    doc_ids = [d.doc_id for d in docs]
    known = set(doc_ids)
    for q in queries:
        missing = [d for d in q.gold_docs if d not in known]
        if missing:
            raise PartitionError(f"query {q.query_id} references unknown docs: {missing}")

    client_ids = [f"c{i}" for i in range(k)]
    base, rem = divmod(len(doc_ids), k)
    capacity = {cid: base + (1 if i < rem else 0) for i, cid in enumerate(client_ids)}
    assignment: dict[str, str] = {}
    load: dict[str, int] = {cid: 0 for cid in client_ids}

    hinted = False
    for d in docs:
        if d.client_hint is not None:
            if d.client_hint not in capacity:
                raise PartitionError(f"doc {d.doc_id} hints unknown client {d.client_hint}")
            assignment[d.doc_id] = d.client_hint
            load[d.client_hint] += 1
            hinted = True

    def pick_least_loaded(exclude: set[str] = frozenset()) -> str:
        candidates = [c for c in client_ids if c not in exclude and load[c] < capacity[c]]
        if not candidates:
            candidates = [c for c in client_ids if c not in exclude]
        if not candidates:
            candidates = client_ids
        return min(candidates, key=lambda c: (load[c], c))

    def place(doc_id: str, client: str) -> None:
        assignment[doc_id] = client
        load[client] += 1

    rng = np.random.default_rng(seed)
    multi = [q for q in queries if len(set(q.gold_docs)) > 1]
    order = rng.permutation(len(multi))
    n_cross_target = round(cross_silo_target * len(queries))
    planned_cross = 0

    for idx in order:
        q = multi[idx]
        gold = sorted(set(q.gold_docs))
        placed_clients = {assignment[d] for d in gold if d in assignment}
        unassigned = [d for d in gold if d not in assignment]
        want_cross = planned_cross < n_cross_target
        if want_cross:
            if len(placed_clients) >= 2:
                for d in unassigned:
                    place(d, pick_least_loaded())
            elif unassigned:
                first = next(iter(placed_clients)) if placed_clients else pick_least_loaded()
                if not placed_clients:
                    place(unassigned[0], first)
                    unassigned = unassigned[1:]
                for d in unassigned:
                    other = pick_least_loaded(exclude={first}) if k > 1 else first
                    place(d, other)
            final_clients = {assignment[d] for d in gold}
            if len(final_clients) >= 2:
                planned_cross += 1
        else:
            if len(placed_clients) >= 2:
                planned_cross += 1  # forced cross by earlier placements
                for d in unassigned:
                    place(d, pick_least_loaded())
                continue
            host = next(iter(placed_clients)) if placed_clients else None
            if host is None or any(load[host] + 1 > capacity[host] for _ in unassigned):
                if host is None:
                    candidates = [c for c in client_ids
                                  if capacity[c] - load[c] >= len(unassigned)]
                    host = min(candidates, key=lambda c: (load[c], c)) if candidates \
                        else pick_least_loaded()
            for d in unassigned:
                place(d, host)
            if len({assignment[d] for d in gold}) >= 2:
                planned_cross += 1

    for d in sorted(set(doc_ids) - set(assignment)):
        place(d, pick_least_loaded())

    home: dict[str, str] = {}
    labels: dict[str, str] = {}
    n_cross = 0
    for q in queries:
        gold_clients = [assignment[d] for d in q.gold_docs]
        if q.home_client is not None:
            if q.home_client not in capacity:
                raise PartitionError(f"query {q.query_id} names unknown home client")
            home_client = q.home_client
        else:
            counts: dict[str, int] = {}
            for c in gold_clients:
                counts[c] = counts.get(c, 0) + 1
            home_client = min(counts, key=lambda c: (-counts[c], c))
        home[q.query_id] = home_client
        local = all(c == home_client for c in gold_clients)
        labels[q.query_id] = "local" if local else "cross_silo"
        n_cross += 0 if local else 1

    achieved = n_cross / len(queries) if queries else 0.0
    if abs(achieved - cross_silo_target) > 0.05 and not hinted:
        log.warning("cross-silo target %.2f not met: achieved %.2f",
                    cross_silo_target, achieved)
    return PartitionSpec(
        clients=k, seed=seed, assignment=assignment, labels=labels, home=home,
        target_cross_fraction=cross_silo_target, achieved_cross_fraction=achieved,
    )


# ---------------------------------------------------------------------------
# Client state and builds


@dataclass
class ClientState:
    client_id: str
    build: LocalBuild
    fused: MemoryBank | None = None

    @property
    def bank(self) -> MemoryBank:
        return self.build.bank

    def view(self) -> MemoryBank:
        return self.fused if self.fused is not None else self.bank


def client_build(client_id: str, docs: list[Document], cfg: BuildConfig,
                 backend) -> ClientState:
    if not docs:
        raise PartitionError(f"client {client_id} has an empty corpus slice")
    return ClientState(client_id=client_id,
                       build=build_local(docs, cfg, backend, client_id=client_id))


# ---------------------------------------------------------------------------
# Export, fusion, rounds


@dataclass
class ExportPayload:
    payload: dict
    embeddings: dict[str, np.ndarray]
    audit: AnonymizationAudit | None

    def serialized(self) -> str:
        return json.dumps(self.payload, sort_keys=True)


def export_bank(state: ClientState, ldp: LdpConfig | None,
                provider: EmbeddingProviderConfig, seed: int) -> ExportPayload:
    """Anonymized (or raw, for the no-protection baseline) shareable view."""
    if ldp is not None:
        bank, audit = anonymize(state.bank, ldp, state.build.graph, provider)
    else:
        bank, audit = state.bank, None
    pseudo = pseudonymize(state.client_id, seed)
    payload = bank_to_dict(bank)
    payload["schema_version"] = EXPORT_SCHEMA_VERSION
    payload["client_pseudonym"] = pseudo
    payload["ldp"] = {"epsilon": ldp.epsilon, "c": ldp.candidates} if ldp else None
    for rec in payload["items"]:
        rec["client"] = pseudo
    embeddings = {it.item_id: it.q_embedding for it in bank.items}
    return ExportPayload(payload=payload, embeddings=embeddings, audit=audit)


def validate_export(payload: dict) -> None:
    if payload.get("schema_version") != EXPORT_SCHEMA_VERSION:
        raise ExportSchemaError("missing or unsupported schema_version")
    if "client_pseudonym" not in payload or "items" not in payload:
        raise ExportSchemaError("payload lacks client_pseudonym or items")
    for rec in payload["items"]:
        for key in ("id", "question", "answer", "support", "origin", "anchors"):
            if key not in rec:
                raise ExportSchemaError(f"item record lacks {key!r}")


@dataclass
class GlobalBank:
    items: list[QaMemoryItem] = field(default_factory=list)

    def for_client(self, pseudo: str) -> list[QaMemoryItem]:
        return [it for it in self.items if it.origin_client != pseudo]


def fuse(exports: list[ExportPayload]) -> GlobalBank:
    """Server-side union with exact-duplicate removal on normalized (q, a)."""
    seen: set[tuple[str, str]] = set()
    fused: list[QaMemoryItem] = []
    for export in exports:
        try:
            validate_export(export.payload)
        except ExportSchemaError as exc:
            log.warning("rejecting upload: %s", exc)
            continue
        pseudo = export.payload["client_pseudonym"]
        for rec in export.payload["items"]:
            key = (normalize(rec["question"]), normalize(rec["answer"]))
            if key in seen:
                continue
            seen.add(key)
            fused.append(
                QaMemoryItem(
                    item_id=f"{pseudo}{FOREIGN_SEP}{rec['id']}",
                    question=rec["question"],
                    answer=rec["answer"],
                    support_ids=tuple(f"{pseudo}{FOREIGN_SEP}{s}" for s in rec["support"]),
                    origin_hyperedge_id=f"{pseudo}{FOREIGN_SEP}{rec['origin']}",
                    origin_client=pseudo,
                    anchors=frozenset(rec["anchors"]),
                    q_embedding=export.embeddings[rec["id"]],
                )
            )
    return GlobalBank(items=fused)


def federate(clients: list[ClientState], ldp: LdpConfig | None,
             provider: EmbeddingProviderConfig, seed: int = 0
             ) -> tuple[GlobalBank, list[ExportPayload]]:
    """Export every client's shareable view, fuse on the server, and push each
    client a fused view of its own raw bank plus everyone else's uploads."""
    exports = [export_bank(state, ldp, provider, seed) for state in clients]
    global_bank = fuse(exports)
    for state in clients:
        pseudo = pseudonymize(state.client_id, seed)
        foreign = global_bank.for_client(pseudo)
        state.fused = with_items(state.bank, list(state.bank.items) + foreign)
    return global_bank, exports


def run_round(clients: list[ClientState], queries: list[Query],
              spec: PartitionSpec, config: RouteConfig, backend,
              provider: EmbeddingProviderConfig, fused: bool = True
              ) -> list[RouteResult]:
    """Route every query at its home client against the fused (or local) view."""
    by_id = {c.client_id: c for c in clients}
    results = []
    for q in queries:
        state = by_id[spec.home[q.query_id]]
        bank = state.view() if fused else state.bank
        results.append(route(q, bank, state.build.graph, config, backend, provider))
    return results


def scan_for_leaks(payload_text: str, docs: list[Document], window: int = 64) -> list[str]:
    """Return every ``window``-char raw-document substring found in a payload."""
    hits = []
    for doc in docs:
        text = doc.text
        for i in range(0, max(0, len(text) - window + 1)):
            chunk = text[i : i + window]
            if chunk in payload_text:
                hits.append(chunk)
    return sorted(set(hits))
