import math

import numpy as np
import pytest

from fedmem.corpus import Document, segment
from fedmem.embedding import EmbeddingProviderConfig, embed_batch
from fedmem.hypergraph import (
    TrainConfig,
    TrainedHypergraph,
    TrainingError,
    _evaluate,
    _grad_one,
    grad_total,
    init_soft_incidence,
    loss_inter,
    loss_intra,
    loss_total,
    optimize_incidence,
    pgd_step,
    project_rows_to_simplex,
    prototypes,
    sparsify,
    train,
)

EPS_S = 1e-8


def test_init_forced_single_cell():
    inc = init_soft_incidence(1, 1, seed=0)
    assert np.allclose(inc.matrix, [[1.0]])


def test_init_rows_stochastic_and_deterministic():
    a = init_soft_incidence(12, 5, seed=3)
    b = init_soft_incidence(12, 5, seed=3)
    assert np.array_equal(a.matrix, b.matrix)
    assert np.allclose(a.matrix.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(a.matrix > 0)


def test_init_edge_cap():
    with pytest.raises(TrainingError, match="cap"):
        init_soft_incidence(4, 10_000, seed=0)


def test_prototype_mean_symmetry():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.array([[0.5], [0.5]])
    protos = prototypes(h, x)
    assert np.allclose(protos[0], [0.5, 0.5], atol=1e-9)


def test_prototype_single_member_identity():
    x = np.array([[0.6, 0.8], [1.0, 0.0]])
    h = np.array([[1.0], [0.0]])
    assert np.allclose(prototypes(h, x)[0], x[0], atol=1e-9)


def test_prototype_matches_weighted_mean_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    h = rng.uniform(0.1, 1.0, size=(3, 2))
    protos = prototypes(h, x)
    for m in range(2):
        expected = sum(h[n, m] * x[n] for n in range(3)) / (h[:, m].sum() + 1e-12)
        assert np.allclose(protos[m], expected, atol=1e-12)


def test_loss_intra_zero_spread_limit():
    x = np.tile([[1.0, 0.0]], (4, 1))
    h = np.ones((4, 1))
    protos = prototypes(h, x)
    val = loss_intra(h, x, protos, EPS_S)
    assert val == pytest.approx(math.sqrt(EPS_S), abs=1e-9)


def test_loss_intra_two_points_at_distance_two():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    h = np.ones((2, 1))
    protos = prototypes(h, x)
    assert np.allclose(protos[0], [0.0, 0.0], atol=1e-12)
    assert loss_intra(h, x, protos, EPS_S) == pytest.approx(1.0, abs=1e-6)


def test_loss_intra_nonnegative():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 3))
    h = project_rows_to_simplex(rng.uniform(size=(6, 4)))
    assert loss_intra(h, x, prototypes(h, x), EPS_S) >= 0.0


def test_loss_inter_single_prototype():
    protos = np.array([[1.0, 0.0]])
    assert loss_inter(protos, margin=1.0, eps_s=EPS_S) == pytest.approx(
        math.sqrt(EPS_S), abs=5e-8
    )


def test_loss_inter_identical_prototypes():
    protos = np.array([[1.0, 0.0], [1.0, 0.0]])
    val = loss_inter(protos, margin=1.0, eps_s=EPS_S)
    # Term-by-term: all four pairs contribute rho*sqrt(eps_s) plus a
    # (1-rho)-weighted hinge that vanishes with the smoothed cosine.
    assert val == pytest.approx(math.sqrt(EPS_S), abs=5e-8)
    assert val < 5e-4


def test_loss_inter_orthogonal_prototypes_hinge_inactive():
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    val = loss_inter(protos, margin=1.0, eps_s=EPS_S)
    assert val == pytest.approx(2 * math.sqrt(EPS_S) / 4, abs=5e-8)


def test_loss_total_endpoints_and_hand_value():
    intra = {"paragraph": 1.0, "sentence": 2.0}
    inter = {"paragraph": 3.0, "sentence": 4.0}
    assert loss_total(intra, inter, 1.0) == pytest.approx(3.0, abs=1e-12)
    assert loss_total(intra, inter, 0.0) == pytest.approx(7.0, abs=1e-12)
    assert loss_total(intra, inter, 0.6) == pytest.approx(4.6, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, m, d = 8, 4, 6
    x_p = rng.normal(size=(n, d))
    x_p /= np.linalg.norm(x_p, axis=1, keepdims=True)
    x_s = rng.normal(size=(n, d))
    x_s /= np.linalg.norm(x_s, axis=1, keepdims=True)
    h_p = project_rows_to_simplex(rng.uniform(0.2, 1.0, size=(n, m)))
    h_s = project_rows_to_simplex(rng.uniform(0.2, 1.0, size=(n, m)))
    cfg = TrainConfig()
    g_p, g_s = grad_total(h_p, h_s, x_p, x_s, cfg)

    def loss_at(hp, hs):
        return _evaluate({"paragraph": hp, "sentence": hs}, {"paragraph": x_p, "sentence": x_s}, cfg)

    step = 1e-5
    for _ in range(20):
        which = rng.integers(2)
        i, j = int(rng.integers(n)), int(rng.integers(m))
        if which == 0:
            hp1, hp2 = h_p.copy(), h_p.copy()
            hp1[i, j] += step
            hp2[i, j] -= step
            fd = (loss_at(hp1, h_s) - loss_at(hp2, h_s)) / (2 * step)
            analytic = g_p[i, j]
        else:
            hs1, hs2 = h_s.copy(), h_s.copy()
            hs1[i, j] += step
            hs2[i, j] -= step
            fd = (loss_at(h_p, hs1) - loss_at(h_p, hs2)) / (2 * step)
            analytic = g_s[i, j]
        assert abs(analytic - fd) / (abs(fd) + 1e-8) < 1e-4


def test_gradient_flat_on_constant_embeddings():
    x = np.tile([[1.0, 0.0, 0.0]], (6, 1))
    h = project_rows_to_simplex(np.random.default_rng(0).uniform(size=(6, 3)))
    cfg = TrainConfig(lam=1.0)
    grad = _grad_one(h, x, cfg)
    assert np.max(np.abs(grad)) < 1e-4


def test_pgd_step_zero_gradient_fixed_point():
    h = project_rows_to_simplex(np.random.default_rng(1).uniform(size=(4, 3)))
    h_next, gm = pgd_step(h, np.zeros_like(h), eta=0.1)
    assert np.allclose(h_next, h, atol=1e-12)
    assert gm < 1e-12  # re-projection of a feasible point is identity up to fp noise


def test_pgd_step_hand_case():
    h = np.array([[0.5, 0.5], [0.5, 0.5]])
    grad = np.array([[1.0, 0.0], [0.0, 0.0]])
    h_next, gm = pgd_step(h, grad, eta=1.0)
    assert np.allclose(h_next[0], [0.0, 1.0])
    assert np.allclose(h_next[1], [0.5, 0.5])
    assert gm == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_pgd_step_stays_on_simplex():
    rng = np.random.default_rng(2)
    h = project_rows_to_simplex(rng.uniform(size=(10, 4)))
    grad = rng.normal(size=(10, 4))
    h_next, _ = pgd_step(h, grad, eta=0.3)
    assert np.all(h_next >= 0)
    assert np.allclose(h_next.sum(axis=1), 1.0, atol=1e-9)


def test_optimize_monotone_under_line_search():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 6))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    cfg = TrainConfig(steps=50, seed=3)
    _, diag = optimize_incidence({"paragraph": x}, cfg)
    assert diag.descent_violations == 0
    losses = [diag.initial_loss] + diag.loss_trace
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert len(diag.loss_trace) == 50
    assert len(diag.gm_norm_trace) == 50


def test_optimize_deterministic_in_seed():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(15, 5))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    cfg = TrainConfig(steps=20, seed=11)
    h1, d1 = optimize_incidence({"paragraph": x}, cfg)
    h2, d2 = optimize_incidence({"paragraph": x}, cfg)
    assert np.array_equal(h1["paragraph"], h2["paragraph"])
    assert d1.loss_trace == d2.loss_trace


def test_sparsify_threshold_fallback_and_ties():
    soft = np.array([
        [0.6, 0.3, 0.1],
        [0.4, 0.35, 0.25],
        [1 / 3, 1 / 3, 1 / 3],
    ])
    binary, kept = sparsify(soft, mu=0.5)
    assert kept == [0]
    assert np.allclose(binary[:, 0], [1, 1, 1])


def test_sparsify_drops_empty_columns_and_keeps_rows():
    soft = np.array([[0.9, 0.1, 0.0], [0.8, 0.15, 0.05]])
    binary, kept = sparsify(soft, mu=0.5)
    assert kept == [0]
    assert binary.shape == (2, 1)
    assert np.all(binary.sum(axis=1) >= 1)


def test_mu_above_half_gives_single_membership():
    rng = np.random.default_rng(9)
    soft = project_rows_to_simplex(rng.uniform(size=(30, 6)))
    binary, _ = sparsify(soft, mu=0.51)
    assert np.all(binary.sum(axis=1) == 1)


def _tiny_build():
    docs = [Document("a", "Acme Corp operates in Berlin. Dr. Grace Hopper advises Acme Corp daily.")]
    paragraphs, sentences = segment(docs)
    provider = EmbeddingProviderConfig(kind="hash", dim=16, seed=0)
    units = {"paragraph": paragraphs, "sentence": sentences}
    x_by = {g: embed_batch([u.text for u in us], provider).values for g, us in units.items()}
    cfg = TrainConfig(steps=60, seed=1, m_paragraph=2, m_sentence=4)
    return train(units, x_by, cfg)


def test_train_materializes_every_unit():
    graph, diag = _tiny_build()
    member_ids = set()
    for edge in graph.hyperedges:
        assert edge.member_unit_ids
        assert len(edge.contexts) == len(edge.member_unit_ids)
        member_ids.update(edge.member_unit_ids)
    assert {"a/p0", "a/s0", "a/s1"} <= member_ids
    assert diag.descent_violations == 0


def test_hypergraph_persistence_round_trip(tmp_path):
    graph, _ = _tiny_build()
    path = tmp_path / "graph.json"
    graph.save(path)
    loaded = TrainedHypergraph.load(path)
    assert [e.hyperedge_id for e in loaded.hyperedges] == [e.hyperedge_id for e in graph.hyperedges]
    for a, b in zip(graph.hyperedges, loaded.hyperedges):
        assert a.member_unit_ids == b.member_unit_ids
        assert a.contexts == b.contexts
        assert a.anchors == b.anchors
        assert [(f.span, f.fact_type) for f in a.facts] == [(f.span, f.fact_type) for f in b.facts]
        assert np.allclose(a.prototype, b.prototype)
    saved_again = tmp_path / "graph2.json"
    loaded.save(saved_again)
    assert path.read_text() == saved_again.read_text()


def test_train_rejects_empty_granularity():
    provider = EmbeddingProviderConfig(kind="hash", dim=16, seed=0)
    x = embed_batch(["a"], provider).values
    with pytest.raises(TrainingError):
        train({"paragraph": [], "sentence": []}, {"paragraph": x, "sentence": x},
              TrainConfig(steps=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(mu=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(margin=-1.0)
