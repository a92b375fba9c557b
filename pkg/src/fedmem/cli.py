"""Batch CLI: build, query, federate, sweep-delta, verify-convergence,
privacy-audit, report.

Exit codes: 0 success, 1 verification/assertion failure, 2 usage error.
When --corpus / --queries are omitted the bundled fixture files are used.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import federation, harness
from .config import AppConfig, ConfigError, load_config
from .corpus import CorpusError, read_corpus_jsonl
from .hypergraph import TrainedHypergraph
from .inference import read_queries_jsonl, route, write_results_jsonl
from .memory import load_bank, save_bank
from .pipeline import build_local
from .privacy import LdpConfig
from .synthetic import privacy_fixture_build_config, privacy_fixture_docs


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("fedmem.data").joinpath(name)))


def _corpus_arg(path: str | None) -> Path:
    return Path(path) if path else fixture_path("fixture_corpus.jsonl")


def _queries_arg(path: str | None) -> Path:
    return Path(path) if path else fixture_path("fixture_queries.jsonl")


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _apply_overrides(cfg: AppConfig, args) -> AppConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "delta", None) is not None:
        cfg.route = replace(cfg.route, delta=args.delta)
    if getattr(args, "alpha", None) is not None:
        cfg.route = replace(cfg.route, alpha=args.alpha)
    if getattr(args, "steps", None) is not None:
        cfg.train = replace(cfg.train, steps=args.steps)
    if getattr(args, "clients", None) is not None:
        cfg.partition.clients = args.clients
    if getattr(args, "cross_silo_target", None) is not None:
        cfg.partition.cross_silo_target = args.cross_silo_target
    if getattr(args, "epsilon", None) is not None:
        base = cfg.ldp or LdpConfig()
        cfg.ldp = replace(base, epsilon=args.epsilon)
    return cfg


def cmd_build(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    docs = read_corpus_jsonl(_corpus_arg(args.corpus))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = build_local(docs, cfg.build_config(), cfg.backend())
    result.diagnostics.to_csv(out / "diagnostics.csv")
    result.graph.diagnostics_path = "diagnostics.csv"
    result.graph.save(out / "hypergraph.json")
    save_bank(result.bank, out / "bank.json")
    counts = result.bank.counts()
    print(f"built {len(result.graph.hyperedges)} hyperedges, "
          f"{counts['total']} memory items "
          f"({counts['fact_level']} fact-level, {counts['multi_hop']} multi-hop) -> {out}")
    return 0


def _load_build_dir(build_dir: str):
    base = Path(build_dir)
    graph = TrainedHypergraph.load(base / "hypergraph.json")
    bank = load_bank(base / "bank.json")
    return graph, bank


def cmd_query(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    graph, bank = _load_build_dir(args.build_dir)
    queries = read_queries_jsonl(_queries_arg(args.queries))
    backend = cfg.backend()
    results = [route(q, bank, graph, cfg.route, backend, cfg.embedding)
               for q in queries]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results_jsonl(results, out)
    if args.report:
        _write_json(harness.split_metrics(results, queries), Path(args.report))
    fast = sum(1 for r in results if r.path == "fast")
    print(f"routed {len(results)} queries ({fast} fast / {len(results) - fast} slow) -> {out}")
    return 0


def cmd_federate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    docs = read_corpus_jsonl(_corpus_arg(args.corpus))
    queries = read_queries_jsonl(_queries_arg(args.queries))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = federation.partition(docs, queries, cfg.partition.clients,
                                cfg.partition.cross_silo_target, cfg.partition.seed)
    spec.save(out / "partition.json")

    backend = cfg.backend()
    by_client = {cid: [] for cid in spec.client_ids()}
    for doc in docs:
        by_client[spec.assignment[doc.doc_id]].append(doc)
    clients = [federation.client_build(cid, client_docs, cfg.build_config(), backend)
               for cid, client_docs in sorted(by_client.items()) if client_docs]

    ldp = cfg.ldp if args.ldp else None
    results_local = federation.run_round(clients, queries, spec, cfg.route, backend,
                                         cfg.embedding, fused=False)
    _global, exports = federation.federate(clients, ldp, cfg.embedding, cfg.seed)
    results_fused = federation.run_round(clients, queries, spec, cfg.route, backend,
                                         cfg.embedding, fused=True)

    exports_dir = out / "exports"
    exports_dir.mkdir(exist_ok=True)
    for state, export in zip(clients, exports):
        payload_path = exports_dir / f"{state.client_id}.json"
        payload_path.write_text(export.serialized() + "\n", encoding="utf-8")
        if export.audit is not None:
            export.audit.save_sidecar(exports_dir / f"{state.client_id}.audit.json")

    write_results_jsonl(results_local, out / "results_local.jsonl")
    write_results_jsonl(results_fused, out / "results_fused.jsonl")
    per_client = {}
    means = {"acc": [], "f1": [], "fast_coverage": []}
    for state in clients:
        mine = [q for q in queries if spec.home[q.query_id] == state.client_id]
        my_results = [r for r in results_fused
                      if spec.home[r.query_id] == state.client_id]
        block = {"bank_items": len(state.bank), "fused_items": len(state.view())}
        if my_results:
            metrics = harness.compute_metrics(my_results, mine)
            block["metrics"] = metrics.to_dict()
            for key in means:
                value = getattr(metrics, key)
                if value is not None:
                    means[key].append(value)
        per_client[state.client_id] = block
    report = {
        "achieved_cross_fraction": spec.achieved_cross_fraction,
        "ldp": {"epsilon": ldp.epsilon, "c": ldp.candidates} if ldp else None,
        "without_fusion": harness.split_metrics(results_local, queries, spec.labels),
        "with_fusion": harness.split_metrics(results_fused, queries, spec.labels),
        "per_client": per_client,
        "client_mean": {k: (sum(v) / len(v) if v else None) for k, v in means.items()},
    }
    _write_json(report, out / "round_report.json")
    print(f"federated round over {len(clients)} clients "
          f"({spec.achieved_cross_fraction:.2f} cross-silo fraction) -> {out}")
    return 0


def cmd_sweep_delta(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    graph, bank = _load_build_dir(args.build_dir)
    queries = read_queries_jsonl(_queries_arg(args.queries))
    grid = [float(x) for x in args.grid.split(",")]
    outcomes = harness.path_outcomes(bank, graph, queries, cfg.route,
                                     cfg.backend(), cfg.embedding)
    points = harness.sweep_delta(outcomes, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_sweep_csv(points, out / "sweep.csv")
    if args.plot:
        try:
            harness.plot_sweep(points, out / "sweep.png")
        except ImportError:
            print("error: --plot requires matplotlib (pip install fedmem[plot])",
                  file=sys.stderr)
            return 2
    print(f"swept {len(points)} thresholds -> {out / 'sweep.csv'}")
    return 0


def cmd_verify_convergence(args) -> int:
    seeds = list(range(args.seeds))
    out = Path(args.out) if args.out else None
    report = harness.verify_convergence(seeds=seeds, n=args.n, dim=args.dim,
                                        steps=args.steps, out_dir=out)
    if out is not None:
        _write_json(report.to_dict(), out / "convergence_report.json")
    for seed_report in report.seeds:
        status = "ok" if not seed_report.failures else "; ".join(seed_report.failures)
        print(f"seed {seed_report.seed}: slope={seed_report.slope:.3f} {status}")
    print("convergence verification:", "PASS" if report.ok else "FAIL")
    return 0 if report.ok else 1


def cmd_privacy_audit(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.build_dir:
        graph, bank = _load_build_dir(args.build_dir)
    else:
        docs = privacy_fixture_docs(seed=cfg.seed)
        fixture_cfg = privacy_fixture_build_config(dim=cfg.embedding.dim)
        build = build_local(docs, fixture_cfg, cfg.backend())
        graph, bank = build.graph, build.bank
    grid = tuple(float(x) for x in args.grid.split(","))
    report = harness.privacy_audit(bank, graph, cfg.embedding, epsilons=grid,
                                   base=cfg.ldp or LdpConfig())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), out / "privacy_audit.json")
    report.write_csv(out / "privacy_audit.csv")
    for row in report.rows:
        print(f"epsilon={row.epsilon:g}: rest@1={row.rest_at_1:.3f} "
              f"downstream_acc={row.downstream_acc:.3f} ({row.events} events)")
    print(f"no-protection attacker ceiling: rest@1={report.control_rest_at_1:.3f}")
    return 0


def cmd_report(args) -> int:
    results = harness.read_results_jsonl(args.results)
    queries = read_queries_jsonl(_queries_arg(args.queries))
    labels = None
    if args.partition:
        labels = federation.PartitionSpec.load(args.partition).labels
    report = harness.split_metrics(results, queries, labels)
    _write_json(report, Path(args.out))
    print(json.dumps(report["all"], indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmem",
        description="hypergraph-grounded QA memory: build, route, federate, audit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, queries=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--delta", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        if queries:
            p.add_argument("--queries", default=None,
                           help="queries JSONL (bundled fixture when omitted)")

    p = sub.add_parser("build", help="corpus -> hypergraph + memory bank")
    common(p)
    p.add_argument("--corpus", default=None, help="corpus JSONL (bundled fixture when omitted)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="route a query file against a build")
    common(p, queries=True)
    p.add_argument("--build-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="also write a metrics report JSON")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("federate", help="partition, per-client builds, fusion, round")
    common(p, queries=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--clients", type=int, default=None)
    p.add_argument("--cross-silo-target", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ldp", action="store_true",
                   help="anonymize exports with the configured LDP budget")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_federate)

    p = sub.add_parser("sweep-delta", help="accuracy/latency/coverage across thresholds")
    common(p, queries=True)
    p.add_argument("--build-dir", required=True)
    p.add_argument("--grid", default="0,0.2,0.4,0.6,0.8,0.9,1.01")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_delta)

    p = sub.add_parser("verify-convergence", help="optimizer descent/stationarity checks")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_convergence)

    p = sub.add_parser("privacy-audit", help="restoration attack across privacy budgets")
    common(p)
    p.add_argument("--build-dir", default=None,
                   help="audit an existing build (synthetic fixture when omitted)")
    p.add_argument("--grid", default="0.1,0.5,1.0,2.0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_privacy_audit)

    p = sub.add_parser("report", help="metrics from a results file")
    common(p, queries=True)
    p.add_argument("--results", required=True)
    p.add_argument("--partition", default=None, help="partition JSON for split labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
