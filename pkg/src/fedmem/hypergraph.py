"""Soft hypergraph learning over text-unit embeddings.

Per granularity (paragraph / sentence) a row-stochastic soft incidence matrix
is optimized by projected gradient descent: an intra term pulls member units
toward their hyperedge prototype, an inter term attracts cosine-similar
prototypes and repels dissimilar ones up to a margin. Training uses the fully
soft membership (the set-based objective is recovered at binary points);
thresholding at ``mu`` afterwards yields the materialized hyperedges.

All distances are smoothed as sqrt(||.||^2 + eps_s) so the objective is
differentiable everywhere, which the backtracking line search (the
diagnostics mode behind the descent/stationarity checks) relies on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import TextUnit, TypedFact, extract_anchors, extract_typed_facts, normalize

EPS_MASS = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    steps: int = 300
    lam: float = 0.6
    margin: float = 1.0
    mu: float = 0.5
    smoothing: float = 1e-8
    m_paragraph: int | None = None  # default ceil(N/4)
    m_sentence: int | None = None
    seed: int = 0
    line_search: bool = True
    max_halvings: int = 30
    m_cap: int = 4096

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 < self.mu <= 1.0:
            raise ValueError("mu must lie in (0, 1]")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")

    def edges_for(self, granularity: str, n_units: int) -> int:
        override = self.m_paragraph if granularity == "paragraph" else self.m_sentence
        m = override if override is not None else math.ceil(n_units / 4)
        return max(1, m)


@dataclass
class SoftIncidence:
    granularity: str
    matrix: np.ndarray

    def validate(self) -> None:
        if np.any(self.matrix < 0):
            raise TrainingError("soft incidence has negative entries")
        sums = self.matrix.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise TrainingError("soft incidence rows do not sum to 1")


@dataclass
class TrainDiagnostics:
    initial_loss: float
    loss_trace: list[float] = field(default_factory=list)
    gm_norm_trace: list[float] = field(default_factory=list)
    local_L_trace: list[float] = field(default_factory=list)
    eta_trace: list[float] = field(default_factory=list)
    descent_violations: int = 0

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else self.initial_loss

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "gm_norm", "local_L", "eta"])
            rows = zip(self.loss_trace, self.gm_norm_trace, self.local_L_trace, self.eta_trace)
            for k, (loss, gm, ll, eta) in enumerate(rows):
                writer.writerow([k, repr(loss), repr(gm), repr(ll), repr(eta)])


@dataclass(frozen=True)
class Hyperedge:
    hyperedge_id: str
    granularity: str
    member_unit_ids: tuple[str, ...]
    prototype: np.ndarray
    contexts: tuple[str, ...]
    facts: tuple[TypedFact, ...]
    anchors: frozenset[str]


# ---------------------------------------------------------------------------
# Simplex machinery


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1])
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_rows_to_simplex(mat: np.ndarray) -> np.ndarray:
    """Row-wise simplex projection, vectorized."""
    mat = np.asarray(mat, dtype=np.float64)
    n, m = mat.shape
    u = np.sort(mat, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, m + 1)
    cond = u - css / idx > 0
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(mat - theta[:, None], 0.0)


def init_soft_incidence(n: int, m: int, seed: int, granularity: str = "paragraph",
                        m_cap: int = 4096) -> SoftIncidence:
    if n < 1 or m < 1:
        raise ValueError("need n >= 1 and m >= 1")
    if m > m_cap:
        raise TrainingError(f"requested {m} hyperedges exceeds the cap of {m_cap}")
    rng = np.random.default_rng(seed)
    mat = rng.uniform(0.0, 1.0, size=(n, m))
    mat /= mat.sum(axis=1, keepdims=True)
    inc = SoftIncidence(granularity, mat)
    inc.validate()
    return inc


# ---------------------------------------------------------------------------
# Objective


def prototypes(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Membership-weighted mean of member embeddings, one row per hyperedge."""
    mass = h.sum(axis=0) + EPS_MASS
    return (h.T @ x) / mass[:, None]


def _smoothed_dists(x: np.ndarray, e: np.ndarray, eps_s: float) -> np.ndarray:
    sq = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(e * e, axis=1)[None, :]
        - 2.0 * (x @ e.T)
    )
    return np.sqrt(np.maximum(sq, 0.0) + eps_s)


def loss_intra(h: np.ndarray, x: np.ndarray, protos: np.ndarray, eps_s: float = 1e-8) -> float:
    dists = _smoothed_dists(x, protos, eps_s)
    mass = h.sum(axis=0) + EPS_MASS
    per_edge = (h * dists).sum(axis=0) / mass
    return float(per_edge.mean())


def _proto_geometry(protos: np.ndarray, eps_s: float):
    norms = np.sqrt(np.sum(protos * protos, axis=1) + eps_s)
    rho = (protos @ protos.T) / (norms[:, None] * norms[None, :])
    dists = _smoothed_dists(protos, protos, eps_s)
    return norms, rho, dists


def loss_inter(protos: np.ndarray, margin: float = 1.0, eps_s: float = 1e-8) -> float:
    m = protos.shape[0]
    _, rho, dists = _proto_geometry(protos, eps_s)
    hinge = np.maximum(margin - dists, 0.0)
    return float((rho * dists + (1.0 - rho) * hinge).sum() / (m * m))


def loss_total(intra_by_gran: dict[str, float], inter_by_gran: dict[str, float],
               lam: float) -> float:
    total = 0.0
    for gran in intra_by_gran:
        total += lam * intra_by_gran[gran] + (1.0 - lam) * inter_by_gran[gran]
    return total


def _evaluate(h_by: dict[str, np.ndarray], x_by: dict[str, np.ndarray],
              cfg: TrainConfig) -> float:
    intra = {}
    inter = {}
    for gran, h in h_by.items():
        protos = prototypes(h, x_by[gran])
        intra[gran] = loss_intra(h, x_by[gran], protos, cfg.smoothing)
        inter[gran] = loss_inter(protos, cfg.margin, cfg.smoothing)
    return loss_total(intra, inter, cfg.lam)


def _grad_one(h: np.ndarray, x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Analytic gradient of lam*L_intra + (1-lam)*L_inter w.r.t. one soft incidence."""
    lam, margin, eps_s = cfg.lam, cfg.margin, cfg.smoothing
    n, m = h.shape
    mass = h.sum(axis=0) + EPS_MASS
    protos = (h.T @ x) / mass[:, None]

    dists = _smoothed_dists(x, protos, eps_s)
    weighted = (h * dists).sum(axis=0)

    # Direct dependence of L_intra on H (membership weights and column mass).
    grad = (lam / m) * (dists / mass[None, :] - weighted[None, :] / (mass**2)[None, :])

    # dL_intra / dE
    w = h / dists
    de = (lam / m) * (protos * w.sum(axis=0)[:, None] - w.T @ x) / mass[:, None]

    # dL_inter / dE
    norms, rho, pd = _proto_geometry(protos, eps_s)
    hinge = np.maximum(margin - pd, 0.0)
    coef_d = rho - (1.0 - rho) * (pd < margin)
    coef_r = pd - hinge
    k1 = coef_d / pd
    term1 = protos * k1.sum(axis=1)[:, None] - k1 @ protos
    term2 = ((coef_r / norms[None, :]) @ protos) / norms[:, None] \
        - protos * ((coef_r * rho).sum(axis=1) / (norms**2))[:, None]
    de += (2.0 * (1.0 - lam) / (m * m)) * (term1 + term2)

    # Chain rule through E = (H^T X) / mass: dE_m/dH_nm = (x_n - e_m)/mass_m.
    grad += (x @ de.T - np.sum(de * protos, axis=1)[None, :]) / mass[None, :]
    return grad


def grad_total(h_p: np.ndarray, h_s: np.ndarray, x_p: np.ndarray, x_s: np.ndarray,
               cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    return _grad_one(h_p, x_p, cfg), _grad_one(h_s, x_s, cfg)


def pgd_step(h: np.ndarray, grad: np.ndarray, eta: float) -> tuple[np.ndarray, float]:
    """One projected step; returns the next iterate and the gradient-mapping norm."""
    if eta <= 0:
        raise ValueError("step size must be positive")
    h_next = project_rows_to_simplex(h - eta * grad)
    g = (h - h_next) / eta
    return h_next, float(np.linalg.norm(g))


# ---------------------------------------------------------------------------
# Training loop


def optimize_incidence(x_by: dict[str, np.ndarray], cfg: TrainConfig
                       ) -> tuple[dict[str, np.ndarray], TrainDiagnostics]:
    """Joint PGD over all granularities present in ``x_by``.

    With line search enabled each step halves eta (starting from the configured
    learning rate, at most ``max_halvings`` times) until
    L(next) <= L(cur) - (eta/2) * ||G||^2 holds; the accepted 1/eta is recorded
    as the local smoothness estimate. Without line search the same inequality
    is only checked, and failures are counted as descent violations.
    """
    grans = sorted(x_by)
    h_by: dict[str, np.ndarray] = {}
    for i, gran in enumerate(grans):
        x = x_by[gran]
        m = cfg.edges_for(gran, x.shape[0])
        h_by[gran] = init_soft_incidence(
            x.shape[0], m, np.random.default_rng([cfg.seed, i]).integers(2**32),
            gran, cfg.m_cap,
        ).matrix

    current = _evaluate(h_by, x_by, cfg)
    if not math.isfinite(current):
        raise TrainingError("non-finite loss at step 0")
    diag = TrainDiagnostics(initial_loss=current)

    for k in range(cfg.steps):
        grads = {gran: _grad_one(h_by[gran], x_by[gran], cfg) for gran in grans}
        eta = cfg.learning_rate
        accepted = None
        for _ in range(cfg.max_halvings + 1):
            cand = {}
            gm_sq = 0.0
            for gran in grans:
                h_next, gm = pgd_step(h_by[gran], grads[gran], eta)
                cand[gran] = h_next
                gm_sq += gm * gm
            cand_loss = _evaluate(cand, x_by, cfg)
            if not math.isfinite(cand_loss):
                raise TrainingError(f"non-finite loss at step {k}")
            ok = cand_loss <= current - 0.5 * eta * gm_sq
            if ok or not cfg.line_search:
                accepted = (cand, cand_loss, gm_sq, eta, ok)
                break
            eta *= 0.5
        if accepted is None:  # every halving failed; take the smallest step
            accepted = (cand, cand_loss, gm_sq, eta, False)
        h_by, current, gm_sq, eta, ok = accepted
        if not ok:
            diag.descent_violations += 1
        diag.loss_trace.append(current)
        diag.gm_norm_trace.append(math.sqrt(gm_sq))
        diag.local_L_trace.append(1.0 / eta)
        diag.eta_trace.append(eta)

    for gran in grans:
        SoftIncidence(gran, h_by[gran]).validate()
    return h_by, diag


# ---------------------------------------------------------------------------
# Sparsification and materialization


def sparsify(soft: np.ndarray, mu: float) -> tuple[np.ndarray, list[int]]:
    """Threshold at mu with an argmax fallback for rows left empty.

    Returns the binary incidence restricted to non-empty hyperedges and the
    kept original column indices (ties in the fallback go to the lowest
    column, which is what argmax gives).
    """
    if not 0.0 < mu <= 1.0:
        raise ValueError("mu must lie in (0, 1]")
    binary = (soft >= mu).astype(np.float64)
    empty_rows = np.nonzero(binary.sum(axis=1) == 0)[0]
    for row in empty_rows:
        binary[row, int(np.argmax(soft[row]))] = 1.0
    kept = [int(c) for c in np.nonzero(binary.sum(axis=0) > 0)[0]]
    return binary[:, kept], kept


def materialize(h_by: dict[str, np.ndarray], units_by: dict[str, list[TextUnit]],
                x_by: dict[str, np.ndarray], cfg: TrainConfig,
                gazetteer_path: str | None = None) -> "TrainedHypergraph":
    """Threshold the soft incidences and build hyperedges with prototypes,
    contexts, typed facts and anchor sets."""
    edges: list[Hyperedge] = []
    for gran in sorted(h_by):
        units = units_by[gran]
        binary, _ = sparsify(h_by[gran], cfg.mu)
        protos = prototypes(binary, x_by[gran])
        facts_by_unit: dict[str, list[TypedFact]] = {u.unit_id: [] for u in units}
        for fact in extract_typed_facts(units, gazetteer_path):
            facts_by_unit[fact.source_unit_id].append(fact)
        prefix = gran[0]
        for col in range(binary.shape[1]):
            member_idx = np.nonzero(binary[:, col] > 0)[0]
            members = tuple(units[i].unit_id for i in member_idx)
            contexts = tuple(units[i].text for i in member_idx)
            facts: list[TypedFact] = []
            for i in member_idx:
                facts.extend(facts_by_unit[units[i].unit_id])
            anchors: set[str] = set()
            for ctx in contexts:
                anchors.update(extract_anchors(ctx).anchors)
            edges.append(
                Hyperedge(
                    hyperedge_id=f"{prefix}{col}",
                    granularity=gran,
                    member_unit_ids=members,
                    prototype=protos[col],
                    contexts=contexts,
                    facts=tuple(facts),
                    anchors=frozenset(anchors),
                )
            )
    return TrainedHypergraph(hyperedges=edges, config=cfg, dim=next(iter(x_by.values())).shape[1])


def train(units_by: dict[str, list[TextUnit]], x_by: dict[str, np.ndarray],
          cfg: TrainConfig, gazetteer_path: str | None = None
          ) -> tuple["TrainedHypergraph", TrainDiagnostics]:
    for gran, units in units_by.items():
        if not units:
            raise TrainingError(f"no {gran} units to train on")
        if len(units) != x_by[gran].shape[0]:
            raise TrainingError(f"{gran}: unit count does not match embedding rows")
    h_by, diag = optimize_incidence(x_by, cfg)
    graph = materialize(h_by, units_by, x_by, cfg, gazetteer_path)
    return graph, diag


# ---------------------------------------------------------------------------
# Persistence


@dataclass
class TrainedHypergraph:
    hyperedges: list[Hyperedge]
    config: TrainConfig
    dim: int
    diagnostics_path: str | None = None

    def __post_init__(self):
        self._by_id = {e.hyperedge_id: e for e in self.hyperedges}

    def get(self, hyperedge_id: str) -> Hyperedge:
        return self._by_id[hyperedge_id]

    def __contains__(self, hyperedge_id: str) -> bool:
        return hyperedge_id in self._by_id

    def fact_vocabulary(self) -> dict[str, list[str]]:
        """Unique normalized spans per fact type, sorted."""
        vocab: dict[str, set[str]] = {}
        for edge in self.hyperedges:
            for fact in edge.facts:
                vocab.setdefault(fact.fact_type, set()).add(fact.span)
        return {t: sorted(spans) for t, spans in sorted(vocab.items())}

    def to_dict(self) -> dict:
        return {
            "hyperedges": [
                {
                    "id": e.hyperedge_id,
                    "granularity": e.granularity,
                    "members": list(e.member_unit_ids),
                    "prototype": [float(v) for v in e.prototype],
                    "contexts": list(e.contexts),
                    "facts": [[f.span, f.fact_type] for f in e.facts],
                }
                for e in self.hyperedges
            ],
            "config": asdict(self.config),
            "diagnostics_path": self.diagnostics_path,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainedHypergraph":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        cfg = TrainConfig(**data["config"])
        edges = []
        dim = 0
        for rec in data["hyperedges"]:
            normed_ctx = [
                (member, " " + normalize(ctx) + " ")
                for member, ctx in zip(rec["members"], rec["contexts"])
            ]
            facts = []
            for span, ftype in rec["facts"]:
                source = rec["members"][0] if rec["members"] else ""
                for member, ctx in normed_ctx:
                    if " " + span + " " in ctx:
                        source = member
                        break
                facts.append(TypedFact(span, ftype, source))
            anchors: set[str] = set()
            for ctx in rec["contexts"]:
                anchors.update(extract_anchors(ctx).anchors)
            proto = np.asarray(rec["prototype"], dtype=np.float64)
            dim = proto.size
            edges.append(
                Hyperedge(
                    hyperedge_id=rec["id"],
                    granularity=rec["granularity"],
                    member_unit_ids=tuple(rec["members"]),
                    prototype=proto,
                    contexts=tuple(rec["contexts"]),
                    facts=tuple(facts),
                    anchors=frozenset(anchors),
                )
            )
        return cls(hyperedges=edges, config=cfg, dim=dim,
                   diagnostics_path=data.get("diagnostics_path"))
