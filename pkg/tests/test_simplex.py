import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmem.hypergraph import project_rows_to_simplex, project_to_simplex


def grid_search_projection(v: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Independent oracle: scan the water-filling level on a fine grid and
    keep the feasible point nearest to v."""
    lo = v.min() - 1.0 / v.size - step
    hi = v.max()
    thetas = np.arange(lo, hi + step, step)
    x = np.maximum(v[None, :] - thetas[:, None], 0.0)
    sums = x.sum(axis=1)
    best = np.argmin(np.abs(sums - 1.0))
    return x[best]


def test_vertex_case():
    assert np.allclose(project_to_simplex(np.array([2.0, 0.0, 0.0])), [1, 0, 0])


def test_symmetric_case():
    out = project_to_simplex(np.array([0.4, 0.4, 0.4]))
    assert np.allclose(out, [1 / 3] * 3)


def test_hand_projection():
    assert np.allclose(project_to_simplex(np.array([-0.5, 0.5])), [0.0, 1.0])


def test_already_on_simplex_unchanged():
    v = np.array([0.2, 0.3, 0.5])
    assert np.allclose(project_to_simplex(v), v, atol=1e-12)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_matches_grid_oracle(n):
    rng = np.random.default_rng(n)
    for _ in range(25):
        v = rng.normal(size=n)
        ours = project_to_simplex(v)
        oracle = grid_search_projection(v)
        assert np.linalg.norm(ours - oracle) < 1e-3
        assert np.all(ours >= 0)
        assert abs(ours.sum() - 1.0) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_projection_feasible_and_idempotent(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(scale=2.0, size=n)
    x = project_to_simplex(v)
    assert np.all(x >= 0)
    assert abs(x.sum() - 1.0) < 1e-9
    again = project_to_simplex(x)
    assert np.linalg.norm(again - x) < 1e-12


def test_row_wise_matches_single():
    rng = np.random.default_rng(7)
    mat = rng.normal(size=(40, 6))
    rows = project_rows_to_simplex(mat)
    for i in range(mat.shape[0]):
        assert np.allclose(rows[i], project_to_simplex(mat[i]), atol=1e-12)
