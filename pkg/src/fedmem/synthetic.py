"""Seeded synthetic inputs for diagnostics and the privacy audit fixture."""

from __future__ import annotations

import numpy as np

from .corpus import Document

FIRST_NAMES = ["Ada", "Alice", "Clara", "Edith", "Elena", "Grace", "Marie",
               "Rosa", "Ruth", "Vera"]
LAST_NAMES = ["Burnell", "Curie", "Franklin", "Germain", "Hamilton", "Hopper",
              "Leavitt", "Meitner", "Noether", "Sommer"]
ORG_HEADS = ["Acme", "Atlas", "Crescent", "Delta", "Northern", "Orion",
             "Quantum", "Stellar", "Summit", "Vector"]
ORG_TAILS = ["Corp", "Foundation", "Institute", "Labs", "University"]
CITIES = ["Berlin", "Boston", "Dublin", "Geneva", "Lisbon", "London", "Madrid",
          "Oslo", "Paris", "Prague", "Rome", "Stockholm", "Tokyo", "Vienna",
          "Warsaw", "Zurich"]


def blob_embeddings(n: int, dim: int, clusters: int, spread: float, seed: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalized points around ``clusters`` pairwise-orthogonal unit
    centers (mutual distance sqrt(2)).

    Returns (X, labels); labels index the generating cluster.
    """
    if clusters > dim:
        raise ValueError("need dim >= clusters for orthogonal centers")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, clusters)))
    centers = basis.T
    labels = np.repeat(np.arange(clusters), int(np.ceil(n / clusters)))[:n]
    points = centers[labels] + spread * rng.normal(size=(n, dim))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    return points, labels


def convergence_inputs(n: int, dim: int, seed: int, clusters: int = 5,
                       spread: float = 0.35) -> dict[str, np.ndarray]:
    """Paragraph and sentence embedding matrices for optimizer diagnostics."""
    x_p, _ = blob_embeddings(n, dim, clusters, spread, seed)
    x_s, _ = blob_embeddings(n, dim, clusters, spread, seed + 10_000)
    return {"paragraph": x_p, "sentence": x_s}


def privacy_fixture_build_config(dim: int = 64):
    """Structure-learning settings for the audit fixture: compactness-driven
    training with the default edge budget, so hyperedges stay document-scale
    and per-item sensitive span counts stay realistic."""
    from .embedding import EmbeddingProviderConfig
    from .hypergraph import TrainConfig
    from .pipeline import BuildConfig

    return BuildConfig(
        embedding=EmbeddingProviderConfig(kind="hash", dim=dim, seed=0),
        train=TrainConfig(learning_rate=0.2, steps=800, lam=1.0, seed=7),
    )


def privacy_fixture_docs(n_docs: int = 60, seed: int = 0) -> list[Document]:
    """Entity-rich documents with PERSON / ORG / LOC spans for the audit."""
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        person = (f"Dr. {FIRST_NAMES[int(rng.integers(len(FIRST_NAMES)))]} "
                  f"{LAST_NAMES[int(rng.integers(len(LAST_NAMES)))]}")
        org = (f"{ORG_HEADS[int(rng.integers(len(ORG_HEADS)))]} "
               f"{ORG_TAILS[int(rng.integers(len(ORG_TAILS)))]}")
        city = CITIES[int(rng.integers(len(CITIES)))]
        year = 1900 + int(rng.integers(100))
        text = (
            f"{person} works at {org}. "
            f"{org} is located in {city}. "
            f"In {year} {person} joined {org}."
        )
        docs.append(Document(doc_id=f"fx{i:03d}", text=text))
    return docs
