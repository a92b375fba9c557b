import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmem.harness import (
    accuracy,
    compute_metrics,
    normalize_answer,
    path_outcomes,
    results_at_delta,
    split_metrics,
    sweep_delta,
    token_f1,
    verify_convergence,
    write_sweep_csv,
)
from fedmem.inference import Query, RouteResult


def test_token_f1_hand_values():
    assert token_f1("same answer", "same answer") == 1.0
    assert token_f1("alpha beta", "gamma delta") == 0.0
    # Common {nobel, prize}; after article removal pred has 2 tokens and gold 4,
    # so P=1, R=1/2, F1=2/3 under the stated normalization rule.
    assert token_f1("the nobel prize", "nobel prize in 1903") == pytest.approx(2 / 3)
    assert token_f1("", "") == 1.0
    assert token_f1("", "x") == 0.0
    assert token_f1("x", "") == 0.0


def test_accuracy_containment():
    assert accuracy("paris", "paris") == 1
    assert accuracy("paris, france", "paris") == 1
    assert accuracy("paris", "paris, france") == 1
    assert accuracy("rome", "paris") == 0


def test_normalize_answer():
    assert normalize_answer("The  Nobel Prize!") == "nobel prize"
    assert normalize_answer("A man, a plan") == "man plan"


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=60), st.text(max_size=60))
def test_f1_bounded_and_symmetric_support(a, b):
    val = token_f1(a, b)
    assert 0.0 <= val <= 1.0
    assert token_f1(a, a) == 1.0


def _results(pairs):
    out = []
    for i, (path, answer, latency, calls) in enumerate(pairs):
        out.append(RouteResult(query_id=f"q{i}", path=path, answer=answer,
                               best_score=0.5, matched_item=None,
                               llm_calls=calls, latency_s=latency))
    return out


def _queries(golds):
    return [Query(query_id=f"q{i}", question="?", gold_answer=g)
            for i, g in enumerate(golds)]


def test_metrics_decomposition_identity():
    results = _results([
        ("fast", "a", 0.1, 0), ("fast", "wrong", 0.1, 0),
        ("slow", "b", 0.5, 1), ("slow", "b", 0.5, 1),
    ])
    queries = _queries(["a", "b", "b", "x"])
    report = compute_metrics(results, queries)
    report.check_decomposition()
    assert report.acc == pytest.approx(0.5)
    assert report.fast_coverage == pytest.approx(0.5)
    assert report.fast_acc == pytest.approx(0.5)
    assert report.slow_acc == pytest.approx(0.5)
    assert report.avg_llm_calls == pytest.approx(0.5)


def test_metrics_single_path_conditionals():
    results = _results([("fast", "a", 0.1, 0)])
    report = compute_metrics(results, _queries(["a"]))
    assert report.slow_acc is None
    report.check_decomposition()


def test_metrics_without_gold():
    results = _results([("slow", "a", 0.1, 1)])
    report = compute_metrics(results, [Query("q0", "?")])
    assert report.acc is None
    assert report.scored == 0
    assert report.avg_llm_calls == 1.0


def test_split_metrics_labels():
    results = _results([("fast", "a", 0.1, 0), ("slow", "b", 0.2, 1)])
    queries = _queries(["a", "b"])
    labels = {"q0": "local", "q1": "cross_silo"}
    report = split_metrics(results, queries, labels)
    assert report["local"]["acc"] == 1.0
    assert report["cross_silo"]["acc"] == 1.0
    assert report["all"]["count"] == 2


@pytest.fixture(scope="module")
def outcomes(app_config, fixture_build, fixture_queries, backend):
    return path_outcomes(fixture_build.bank, fixture_build.graph, fixture_queries,
                         app_config.route, backend, app_config.embedding)


def test_sweep_endpoints_and_monotone_coverage(outcomes):
    grid = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.01]
    points = sweep_delta(outcomes, grid)
    assert [p.delta for p in points] == sorted(grid)
    assert points[0].fast_coverage == 1.0
    assert points[-1].fast_coverage == 0.0
    coverages = [p.fast_coverage for p in points]
    assert all(b <= a for a, b in zip(coverages, coverages[1:]))


def test_sweep_matches_forced_paths(outcomes, fixture_queries):
    mem_only = compute_metrics(results_at_delta(outcomes, 0.0, force="fast"),
                               fixture_queries)
    cog_only = compute_metrics(results_at_delta(outcomes, 0.0, force="slow"),
                               fixture_queries)
    at_zero = compute_metrics(results_at_delta(outcomes, 0.0), fixture_queries)
    at_top = compute_metrics(results_at_delta(outcomes, 1.01), fixture_queries)
    assert at_zero.acc == mem_only.acc
    assert at_zero.fast_coverage == 1.0
    assert at_zero.avg_llm_calls == 0.0
    assert at_top.acc == cog_only.acc
    assert at_top.fast_coverage == 0.0
    assert at_top.avg_llm_calls == 1.0


def test_sweep_csv_written(outcomes, tmp_path):
    points = sweep_delta(outcomes, [0.0, 0.8, 1.01])
    write_sweep_csv(points, tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "delta,accuracy,mean_latency_s,fast_coverage"
    assert len(lines) == 4


def test_verify_convergence_small_run():
    report = verify_convergence(seeds=[0, 1], n=20, dim=6, steps=80,
                                t_grid=(20, 40, 80), slope_pass_fraction=0.5)
    for seed_report in report.seeds:
        assert seed_report.descent_ok, seed_report.failures
        assert seed_report.bound_ok, seed_report.failures
    data = report.to_dict()
    assert "seeds" in data and len(data["seeds"]) == 2
