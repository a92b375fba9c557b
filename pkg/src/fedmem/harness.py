"""Evaluation harness: QA metrics, threshold sweeps, optimizer verification,
and the privacy restoration audit."""

from __future__ import annotations

import csv
import json
import math
import re
import string
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import extract_anchors, normalize
from .embedding import EmbeddingProviderConfig, embed_batch
from .hypergraph import TrainConfig, TrainedHypergraph, optimize_incidence
from .inference import (
    Query,
    RouteConfig,
    RouteResult,
    localize,
    score_all,
    top_k,
)
from .llmclient import GenRequest, render_rag_prompt
from .memory import MemoryBank
from .privacy import LdpConfig, PerturbationEvent, anonymize, sensitive_spans_for_item
from .synthetic import convergence_inputs

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def token_f1(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    from collections import Counter

    common = Counter(pred_tokens) & Counter(gold_tokens)
    n_common = sum(common.values())
    if n_common == 0:
        return 0.0
    precision = n_common / len(pred_tokens)
    recall = n_common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def accuracy(prediction: str, gold: str) -> int:
    """Bidirectional containment after normalization (this artifact's ACC
    convention; see README)."""
    p = normalize_answer(prediction)
    g = normalize_answer(gold)
    if not p and not g:
        return 1
    if not p or not g:
        return 0
    return 1 if (g in p or p in g) else 0


# ---------------------------------------------------------------------------
# Metrics reports


@dataclass
class MetricsReport:
    count: int
    scored: int  # queries with a gold answer
    f1: float | None
    acc: float | None
    fast_coverage: float | None
    fast_acc: float | None
    slow_acc: float | None
    mean_latency_s: float
    avg_llm_calls: float

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "scored": self.scored,
            "f1": self.f1,
            "acc": self.acc,
            "fast_coverage": self.fast_coverage,
            "fast_acc": self.fast_acc,
            "slow_acc": self.slow_acc,
            "mean_latency_s": self.mean_latency_s,
            "avg_llm_calls": self.avg_llm_calls,
        }

    def check_decomposition(self, tol: float = 1e-9) -> None:
        if self.acc is None or self.fast_coverage is None:
            return
        fast = self.fast_acc or 0.0
        slow = self.slow_acc or 0.0
        mix = self.fast_coverage * fast + (1.0 - self.fast_coverage) * slow
        if abs(mix - self.acc) > tol:
            raise AssertionError(
                f"decomposition identity violated: {mix!r} vs acc {self.acc!r}"
            )


def compute_metrics(results: list[RouteResult], queries: list[Query]) -> MetricsReport:
    """Pooled metrics over a result/query pairing.

    Accuracy-family numbers (f1, acc, coverage, conditional accs) are computed
    over the queries that carry a gold answer so the weighted decomposition
    identity holds exactly; latency and call counts cover every query.
    """
    by_id = {q.query_id: q for q in queries}
    lat = [r.latency_s for r in results]
    calls = [r.llm_calls for r in results]
    scored = [(r, by_id[r.query_id]) for r in results
              if r.query_id in by_id and by_id[r.query_id].gold_answer is not None]
    if not scored:
        return MetricsReport(
            count=len(results), scored=0, f1=None, acc=None, fast_coverage=None,
            fast_acc=None, slow_acc=None,
            mean_latency_s=float(np.mean(lat)) if lat else 0.0,
            avg_llm_calls=float(np.mean(calls)) if calls else 0.0,
        )
    f1s = [token_f1(r.answer, q.gold_answer) for r, q in scored]
    accs = [accuracy(r.answer, q.gold_answer) for r, q in scored]
    fast_accs = [a for (r, _), a in zip(scored, accs) if r.path == "fast"]
    slow_accs = [a for (r, _), a in zip(scored, accs) if r.path == "slow"]
    n = len(scored)
    report = MetricsReport(
        count=len(results),
        scored=n,
        f1=float(np.mean(f1s)),
        acc=float(np.mean(accs)),
        fast_coverage=len(fast_accs) / n,
        fast_acc=float(np.mean(fast_accs)) if fast_accs else None,
        slow_acc=float(np.mean(slow_accs)) if slow_accs else None,
        mean_latency_s=float(np.mean(lat)) if lat else 0.0,
        avg_llm_calls=float(np.mean(calls)) if calls else 0.0,
    )
    report.check_decomposition()
    return report


def split_metrics(results: list[RouteResult], queries: list[Query],
                  labels: dict[str, str] | None = None) -> dict[str, dict]:
    out = {"all": compute_metrics(results, queries).to_dict()}
    if labels:
        for label in ("local", "cross_silo"):
            ids = {qid for qid, lab in labels.items() if lab == label}
            sub_r = [r for r in results if r.query_id in ids]
            sub_q = [q for q in queries if q.query_id in ids]
            if sub_r:
                out[label] = compute_metrics(sub_r, sub_q).to_dict()
    return out


# ---------------------------------------------------------------------------
# Delta sweep (score once, threshold many times)


@dataclass
class PathOutcome:
    query: Query
    best_score: float
    fast_answer: str | None
    fast_item: str | None
    fast_latency_s: float
    slow_answer: str
    slow_items: list[str]
    slow_latency_s: float


@dataclass
class SweepPoint:
    delta: float
    accuracy: float | None
    mean_latency_s: float
    fast_coverage: float


def path_outcomes(bank: MemoryBank, graph: TrainedHypergraph | None,
                  queries: list[Query], config: RouteConfig, backend,
                  provider: EmbeddingProviderConfig) -> list[PathOutcome]:
    """Evaluate both paths once per query; the threshold only selects later."""
    outcomes = []
    for q in queries:
        t0 = time.perf_counter()
        q_emb = embed_batch([q.question], provider).values[0]
        q_anchors = extract_anchors(q.question)
        if bank.items:
            scores = score_all(q_emb, q_anchors, bank, config.alpha)
            best_idx = min(range(len(bank.items)),
                           key=lambda i: (-scores[i], bank.items[i].item_id))
            best = float(scores[best_idx])
            fast_answer = bank.items[best_idx].answer
            fast_item = bank.items[best_idx].item_id
            ranked = top_k(q_emb, q_anchors, bank, config.alpha, config.top_k)
        else:
            best, fast_answer, fast_item, ranked = 0.0, None, None, []
        t1 = time.perf_counter()
        if ranked:
            localized = localize([it for it, _ in ranked], graph)
            evidence = []
            for edge_id in localized:
                if graph is not None and edge_id in graph:
                    edge = graph.get(edge_id)
                    evidence.append((edge_id, list(edge.contexts),
                                     [(f.span, f.fact_type) for f in edge.facts]))
        else:
            evidence = []
        prompt = render_rag_prompt(q.question, [(it.question, it.answer) for it, _ in ranked],
                                   evidence)
        resp = backend.generate(GenRequest(prompt=prompt, tag="rag_answer"))
        t2 = time.perf_counter()
        outcomes.append(PathOutcome(
            query=q, best_score=best, fast_answer=fast_answer, fast_item=fast_item,
            fast_latency_s=t1 - t0, slow_answer=resp.text.strip(),
            slow_items=[it.item_id for it, _ in ranked], slow_latency_s=t2 - t0,
        ))
    return outcomes


def results_at_delta(outcomes: list[PathOutcome], delta: float,
                     force: str | None = None) -> list[RouteResult]:
    """Materialize per-query results for one threshold.

    ``force`` = "fast" reproduces a memory-only system, "slow" a
    reasoning-only one.
    """
    results = []
    for oc in outcomes:
        fast = oc.fast_answer is not None and (
            force == "fast" or (force is None and oc.best_score >= delta)
        )
        if fast:
            results.append(RouteResult(
                query_id=oc.query.query_id, path="fast", answer=oc.fast_answer,
                best_score=oc.best_score, matched_item=oc.fast_item, llm_calls=0,
                latency_s=oc.fast_latency_s,
            ))
        else:
            results.append(RouteResult(
                query_id=oc.query.query_id, path="slow", answer=oc.slow_answer,
                best_score=oc.best_score, matched_item=oc.fast_item,
                retrieved_items=list(oc.slow_items), llm_calls=1,
                latency_s=oc.slow_latency_s,
            ))
    return results


def sweep_delta(outcomes: list[PathOutcome], grid: list[float]) -> list[SweepPoint]:
    points = []
    queries = [oc.query for oc in outcomes]
    for delta in sorted(grid):
        report = compute_metrics(results_at_delta(outcomes, delta), queries)
        coverage = report.fast_coverage
        if coverage is None:
            n_fast = sum(1 for oc in outcomes
                         if oc.fast_answer is not None and oc.best_score >= delta)
            coverage = n_fast / len(outcomes) if outcomes else 0.0
        points.append(SweepPoint(
            delta=delta, accuracy=report.acc,
            mean_latency_s=report.mean_latency_s, fast_coverage=coverage,
        ))
    return points


def write_sweep_csv(points: list[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta", "accuracy", "mean_latency_s", "fast_coverage"])
        for p in points:
            writer.writerow([
                repr(p.delta),
                "" if p.accuracy is None else repr(p.accuracy),
                repr(p.mean_latency_s),
                repr(p.fast_coverage),
            ])


def plot_sweep(points: list[SweepPoint], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    lat = [p.mean_latency_s for p in points]
    acc = [p.accuracy if p.accuracy is not None else 0.0 for p in points]
    ax.plot(lat, acc, "o-")
    for p, x, y in zip(points, lat, acc):
        ax.annotate(f"{p.delta:g}", (x, y), fontsize=8)
    ax.set_xlabel("mean latency (s)")
    ax.set_ylabel("accuracy")
    ax.set_title("accuracy/latency trade-off across thresholds")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Convergence verification


@dataclass
class SeedDiagnostics:
    seed: int
    descent_ok: bool
    bound_ok: bool
    stabilized: bool
    slope: float
    min_gm_sq_by_t: dict[int, float]
    failures: list[str] = field(default_factory=list)


@dataclass
class ConvergenceReport:
    seeds: list[SeedDiagnostics]
    slope_threshold: float
    slope_pass_needed: int

    @property
    def ok(self) -> bool:
        hard = all(s.descent_ok and s.bound_ok and s.stabilized for s in self.seeds)
        slope_passes = sum(1 for s in self.seeds if s.slope <= self.slope_threshold)
        return hard and slope_passes >= self.slope_pass_needed

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "slope_threshold": self.slope_threshold,
            "slope_pass_needed": self.slope_pass_needed,
            "seeds": [
                {
                    "seed": s.seed,
                    "descent_ok": s.descent_ok,
                    "bound_ok": s.bound_ok,
                    "stabilized": s.stabilized,
                    "slope": s.slope,
                    "min_gm_sq_by_t": {str(k): v for k, v in s.min_gm_sq_by_t.items()},
                    "failures": s.failures,
                }
                for s in self.seeds
            ],
        }


def check_descent_trace(diag, tol: float = 1e-12) -> list[str]:
    """Re-assert the accepted-step inequality from the recorded traces."""
    failures = []
    prev = diag.initial_loss
    for k, (loss, gm, local_l) in enumerate(
        zip(diag.loss_trace, diag.gm_norm_trace, diag.local_L_trace)
    ):
        bound = prev - (gm * gm) / (2.0 * local_l)
        if loss > bound + tol * max(1.0, abs(prev)):
            failures.append(f"descent inequality violated at step {k}")
        prev = loss
    if diag.descent_violations:
        failures.append(f"{diag.descent_violations} recorded descent violations")
    return failures


def check_stationarity_bound(diag, t: int, tol: float = 1e-9) -> bool:
    """min_{k<T} ||G_k||^2 <= 2 * max local_L * (loss_0 - loss_T) / T."""
    gm_sq = np.array(diag.gm_norm_trace[:t]) ** 2
    l_max = max(diag.local_L_trace[:t])
    delta = diag.initial_loss - diag.loss_trace[t - 1]
    return float(gm_sq.min()) <= 2.0 * l_max * delta / t + tol


def verify_convergence(seeds: list[int] | None = None, n: int = 40, dim: int = 8,
                       steps: int = 300, t_grid: tuple[int, ...] = (50, 100, 200, 400),
                       slope_threshold: float = -0.8, slope_pass_fraction: float = 0.8,
                       out_dir: str | Path | None = None,
                       base_config: TrainConfig | None = None) -> ConvergenceReport:
    """Run the optimizer on seeded synthetic inputs and check every recorded
    trace: per-step descent, the stationarity trace bound at several horizons,
    late-stage loss stabilization, and the decay rate of the best gradient
    mapping so far."""
    if seeds is None:
        seeds = list(range(10))
    t_run = max(steps, max(t_grid))
    reports = []
    for seed in seeds:
        cfg = base_config or TrainConfig()
        cfg = replace(cfg, steps=t_run, seed=seed, line_search=True)
        x_by = convergence_inputs(n, dim, seed)
        _, diag = optimize_incidence(x_by, cfg)

        failures = check_descent_trace(diag)
        descent_ok = not failures

        bound_ok = True
        for t in sorted(set(t_grid) | {steps}):
            if not check_stationarity_bound(diag, t):
                bound_ok = False
                failures.append(f"stationarity trace bound violated at T={t}")

        late = diag.loss_trace[steps - 1]
        mid = diag.loss_trace[max(0, int(0.8 * steps) - 1)]
        stabilized = abs(late - mid) / max(abs(diag.initial_loss), 1e-12) < 0.05
        if not stabilized:
            failures.append("loss did not stabilize over the last 20% of steps")

        min_by_t = {}
        for t in sorted(t_grid):
            gm_sq = np.array(diag.gm_norm_trace[:t]) ** 2
            min_by_t[t] = max(float(gm_sq.min()), 1e-30)
        xs = np.log(np.array(sorted(min_by_t)))
        ys = np.log(np.array([min_by_t[t] for t in sorted(min_by_t)]))
        slope = float(np.polyfit(xs, ys, 1)[0])

        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            diag.to_csv(out / f"trace_seed{seed}.csv")
        reports.append(SeedDiagnostics(
            seed=seed, descent_ok=descent_ok, bound_ok=bound_ok,
            stabilized=stabilized, slope=slope, min_gm_sq_by_t=min_by_t,
            failures=failures,
        ))
    return ConvergenceReport(
        seeds=reports,
        slope_threshold=slope_threshold,
        slope_pass_needed=math.ceil(slope_pass_fraction * len(seeds)),
    )


# ---------------------------------------------------------------------------
# Privacy restoration audit


@dataclass
class AuditRow:
    epsilon: float
    rest_at_1: float
    downstream_acc: float
    events: int
    kept_fraction: float


@dataclass
class AuditReport:
    rows: list[AuditRow]
    control_rest_at_1: float

    def to_dict(self) -> dict:
        return {
            "control_rest_at_1": self.control_rest_at_1,
            "rows": [
                {
                    "epsilon": r.epsilon,
                    "rest_at_1": r.rest_at_1,
                    "downstream_acc": r.downstream_acc,
                    "events": r.events,
                    "kept_fraction": r.kept_fraction,
                }
                for r in self.rows
            ],
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epsilon", "rest_at_1", "downstream_acc", "events",
                             "kept_fraction"])
            for r in self.rows:
                writer.writerow([repr(r.epsilon), repr(r.rest_at_1),
                                 repr(r.downstream_acc), r.events,
                                 repr(r.kept_fraction)])


def _context_window(item, span: str, window: int = 5) -> str:
    """The text a curious server sees around a shared span: a window of the
    item's question/answer if the span occurs there, else the exported anchor
    string carrying it."""
    text_norm = normalize(item.question + " " + item.answer)
    tokens = text_norm.split()
    span_tokens = span.split()
    n = len(span_tokens)
    for i in range(len(tokens) - n + 1):
        if tokens[i : i + n] == span_tokens:
            lo = max(0, i - window)
            hi = min(len(tokens), i + n + window)
            return " ".join(tokens[lo:hi])
    padded = " " + span + " "
    for anchor in sorted(item.anchors):
        if padded in " " + anchor + " ":
            return anchor
    return text_norm


def restoration_attack(events: list[PerturbationEvent], bank: MemoryBank,
                       vocab: dict[str, list[str]],
                       provider: EmbeddingProviderConfig) -> float:
    """Nearest-neighbour attacker: embed the shared item's context window
    around the (possibly perturbed) span and guess the closest same-type
    vocabulary entry. Returns the fraction of exact recoveries."""
    if not events:
        return 0.0
    by_id = {it.item_id: it for it in bank.items}
    all_entities = sorted({v for vs in vocab.values() for v in vs})
    mats = embed_batch(all_entities, provider).values
    vocab_embs = {e: mats[i] for i, e in enumerate(all_entities)}
    windows = [_context_window(by_id[ev.item_id], ev.surrogate) for ev in events]
    w_embs = embed_batch(windows, provider).values
    hits = 0
    for event, w_emb in zip(events, w_embs):
        pool = vocab[event.fact_type]
        sims = [float(vocab_embs[v] @ w_emb) for v in pool]
        guess = min(zip(sims, pool), key=lambda t: (-t[0], t[1]))[1]
        if guess == event.original:
            hits += 1
    return hits / len(events)


def privacy_audit(bank: MemoryBank, graph: TrainedHypergraph,
                  provider: EmbeddingProviderConfig,
                  epsilons: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0),
                  base: LdpConfig | None = None,
                  max_queries: int = 80) -> AuditReport:
    """Anonymize at each budget, attack the shared items, and measure the
    memory-only answer accuracy a receiving client would see."""
    base = base or LdpConfig()
    vocab = graph.fact_vocabulary()
    vocab = {t: vocab.get(t, []) for t in base.sensitive_types}

    paired = [(it.question, it.answer) for it in bank.items[:max_queries]]
    q_embs = embed_batch([q for q, _ in paired], provider).values if paired else None
    q_anchors = [extract_anchors(q) for q, _ in paired]

    control_events = []
    for item in bank.items:
        for span, ftype in sensitive_spans_for_item(item, graph, base.sensitive_types):
            control_events.append(PerturbationEvent(item.item_id, ftype, span, span))
    control = restoration_attack(control_events, bank, vocab, provider)

    rows = []
    for eps in epsilons:
        cfg = replace(base, epsilon=eps)
        anon_bank, audit = anonymize(bank, cfg, graph, provider)
        rest = restoration_attack(audit.events, anon_bank, vocab, provider)
        kept = (sum(1 for e in audit.events if e.kept) / len(audit.events)
                if audit.events else 1.0)
        correct = 0
        for i, (_, gold) in enumerate(paired):
            scores = score_all(q_embs[i], q_anchors[i], anon_bank, alpha=0.7)
            best_idx = min(range(len(anon_bank.items)),
                           key=lambda j: (-scores[j], anon_bank.items[j].item_id))
            correct += accuracy(anon_bank.items[best_idx].answer, gold)
        acc = correct / len(paired) if paired else 0.0
        rows.append(AuditRow(epsilon=eps, rest_at_1=rest, downstream_acc=acc,
                             events=len(audit.events), kept_fraction=kept))
    return AuditReport(rows=rows, control_rest_at_1=control)


# ---------------------------------------------------------------------------
# Result file IO


def read_results_jsonl(path: str | Path) -> list[RouteResult]:
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            results.append(RouteResult(
                query_id=obj["query_id"], path=obj["path"], answer=obj["answer"],
                best_score=obj["best_score"], matched_item=obj.get("matched_item"),
                retrieved_items=obj.get("retrieved_items", []),
                localized_hyperedges=obj.get("localized_hyperedges", []),
                llm_calls=obj.get("llm_calls", 0),
                latency_s=obj.get("latency_s", 0.0), error=obj.get("error"),
            ))
    return results
