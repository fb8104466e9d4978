import math

import numpy as np
import pytest
import scipy.sparse
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from latent_atlas import embedder
from latent_atlas.dataio import FeatureMatrix
from oracles import brute_knn

# sigma solving 1 + e^{-1/s} + e^{-2/s} + e^{-4/s} = log2(4), scipy brentq at xtol 1e-15
SIGMA_1235 = 1.7780965750173676
# scipy.optimize.curve_fit of 1/(1 + a x^{2b}) on the same 300-point target
AB_ORACLE = {
    (0.1, 1.0): (1.5769434602697652, 0.8950608778515733),
    (0.5, 1.0): (0.58303002, 1.33416699),
    (0.01, 1.0): (1.89560587, 0.80063784),
    (0.1, 2.0): (0.54466054, 0.84205543),
}


def _fm(v):
    return FeatureMatrix(v, tuple(f"o{i}" for i in range(len(v))), tuple(f"f{j}" for j in range(v.shape[1])))


def _cliques(seed=0, n=30):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 0.05, (n, 5))
    b = rng.normal(0.0, 0.05, (n, 5)) + 3.0
    return _fm(np.vstack([a, b]))


def test_knn_matches_brute_force():
    X = np.random.default_rng(1).random((40, 3))
    g = embedder.knn_graph(X, 6)
    idx, dist = brute_knn(X, 6)
    assert np.array_equal(g.indices, idx)
    assert np.allclose(g.distances, dist, rtol=0, atol=1e-12)


def test_knn_ties_go_to_lower_index():
    X = np.array([[0.0], [1.0], [-1.0], [2.0]])
    g = embedder.knn_graph(X, 2)
    assert g.indices[0].tolist() == [1, 2]


def test_knn_rejects_bad_k():
    with pytest.raises(ValueError):
        embedder.knn_graph(np.zeros((3, 2)), 3)


def test_calibration_against_bisection_oracle():
    rho, sigma = embedder.smooth_knn_calibrate([1.0, 2.0, 3.0, 5.0], 4)
    assert rho == 1.0
    total = sum(math.exp(-max(0.0, d - rho) / sigma) for d in (1, 2, 3, 5))
    assert abs(total - 2.0) <= 1e-5
    assert abs(sigma - SIGMA_1235) < 1e-4


@pytest.mark.parametrize("d, k", [([1.0, 2.0], 2), ([3.0, 3.0, 3.0, 3.0], 4)])
def test_calibration_clamps_unreachable_targets(d, k):
    _, sigma = embedder.smooth_knn_calibrate(d, k)
    assert sigma == embedder.SIGMA_MIN


@given(st.lists(st.floats(0.0, 100.0), min_size=3, max_size=30).map(sorted))
def test_calibration_residual_or_clamp(d):
    k = len(d)
    rho, sigma = embedder.smooth_knn_calibrate(d, k)
    assert embedder.SIGMA_MIN <= sigma <= embedder.SIGMA_MAX
    total = float(np.exp(-np.maximum(np.array(d) - rho, 0.0) / sigma).sum())
    assert abs(total - math.log2(k)) <= 1e-5 or sigma in (embedder.SIGMA_MIN, embedder.SIGMA_MAX)


@given(hnp.arrays(np.float64, (6, 6), elements=st.floats(0.0, 1.0)))
def test_fuzzy_union_is_probabilistic_tconorm(w):
    np.fill_diagonal(w, 0.0)
    U = embedder.fuzzy_union(scipy.sparse.csr_matrix(w)).toarray()
    expect = w + w.T - w * w.T
    np.fill_diagonal(expect, 0.0)
    assert np.allclose(U, expect, atol=1e-15)
    assert np.array_equal(U, U.T)
    assert np.all((U >= 0) & (U <= 1))


@pytest.mark.parametrize("key", sorted(AB_ORACLE))
def test_curve_fit_against_least_squares_oracle(key):
    a, b = embedder.fit_curve_ab(*key)
    oa, ob = AB_ORACLE[key]
    assert abs(a - oa) <= 0.02 and abs(b - ob) <= 0.02


def test_layout_separates_two_cliques():
    X = _cliques()
    _, emb = embedder.fit(X, embedder.EmbedParams(n_neighbors=10, seed=3))
    Y = emb.coords
    A, B = Y[:30], Y[30:]

    def mean_dist(P, Q):
        return float(np.mean(np.linalg.norm(P[:, None] - Q[None], axis=2)))

    intra = (mean_dist(A, A) + mean_dist(B, B)) / 2
    assert mean_dist(A, B) > 2 * intra


def test_fit_is_deterministic(tmp_path):
    X = _cliques(seed=5)
    p = embedder.EmbedParams(n_neighbors=8, n_epochs=100, seed=11)
    _, e1 = embedder.fit(X, p)
    _, e2 = embedder.fit(X, p)
    embedder.write_embedding_csv(tmp_path / "a.csv", e1)
    embedder.write_embedding_csv(tmp_path / "b.csv", e2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    _, e3 = embedder.fit(X, embedder.EmbedParams(n_neighbors=8, n_epochs=100, seed=12))
    assert not np.array_equal(e1.coords, e3.coords)


def test_transform_of_training_point_lands_on_it():
    X = _cliques(seed=2)
    model, emb = embedder.fit(X, embedder.EmbedParams(n_neighbors=8, n_epochs=50, seed=0))
    out = embedder.transform(model, X.values[[4, 40]])
    assert np.array_equal(out.coords, emb.coords[[4, 40]])


def test_transform_of_duplicated_training_rows_goes_to_their_mean():
    v = _cliques(seed=2).values
    v = np.vstack([v, v[7]])  # rows 7 and 60 are twins
    model, emb = embedder.fit(_fm(v), embedder.EmbedParams(n_neighbors=8, n_epochs=50, seed=0))
    out = embedder.transform(model, v[[7]])
    assert np.array_equal(out.coords[0], emb.coords[[7, 60]].mean(axis=0))


def test_transform_new_points_stay_within_training_hull():
    X = _cliques(seed=4)
    model, emb = embedder.fit(X, embedder.EmbedParams(n_neighbors=8, n_epochs=50, seed=0))
    new = np.random.default_rng(0).normal(0.0, 0.05, (10, 5))
    out = embedder.transform(model, new).coords
    lo, hi = emb.coords.min(axis=0), emb.coords.max(axis=0)
    assert np.all(out >= lo) and np.all(out <= hi)


def test_transform_rejects_wrong_width():
    X = _cliques()
    model, _ = embedder.fit(X, embedder.EmbedParams(n_neighbors=5, n_epochs=10))
    with pytest.raises(ValueError):
        embedder.transform(model, np.zeros((1, 3)))


def test_model_roundtrip_preserves_transform(tmp_path):
    X = _cliques(seed=6)
    model, _ = embedder.fit(X, embedder.EmbedParams(n_neighbors=8, n_epochs=50, seed=0, transform_epochs=20))
    embedder.save_model(model, tmp_path / "m.json")
    back = embedder.load_model(tmp_path / "m.json")
    new = np.random.default_rng(1).random((5, 5))
    assert np.array_equal(embedder.transform(model, new).coords, embedder.transform(back, new).coords)


def test_precomputed_csv_roundtrip(tmp_path):
    emb = embedder.Embedding(np.array([[0.1, 1 / 3], [2.0, -5e-300]]), ("a", "b"))
    embedder.write_embedding_csv(tmp_path / "e.csv", emb)
    back = embedder.load_precomputed(tmp_path / "e.csv")
    assert back.obs_ids == emb.obs_ids and np.array_equal(back.coords, emb.coords)
