import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent_atlas import dls, profiler
from latent_atlas.dataio import FeatureMatrix, load_tensor_dataset
from latent_atlas.io_utils import read_pgm
from latent_atlas.statmap import Cluster
from latent_atlas.synthetic import two_blobs
from oracles import pair_count_u, tie_corrected_z

small_groups = st.lists(st.integers(0, 5).map(float), min_size=1, max_size=8)


def test_u_simple_example():
    U, z, p = profiler.mann_whitney([1, 2], [3, 4])
    assert U == 0.0 and z < 0


def test_identical_groups_are_neutral():
    U, z, p = profiler.mann_whitney([1, 2, 3], [1, 2, 3])
    assert z == 0.0 and p == 1.0 and U == 4.5


def test_all_tied_values():
    U, z, p = profiler.mann_whitney([2, 2], [2, 2, 2])
    assert (U, z, p) == (3.0, 0.0, 1.0)


def test_empty_group_rejected():
    with pytest.raises(profiler.ProfileError):
        profiler.mann_whitney([], [1.0])


def test_thousand_random_pairs_against_pair_count():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        a = rng.integers(0, 6, rng.integers(1, 9)).astype(float)
        b = rng.integers(0, 6, rng.integers(1, 9)).astype(float)
        U, z, p = profiler.mann_whitney(a, b)
        assert U == pair_count_u(a, b)
        assert abs(z - tie_corrected_z(a, b, U)) <= 1e-12
        assert 0.0 < p <= 1.0


@given(small_groups, small_groups)
def test_u_complement(a, b):
    ua = profiler.mann_whitney(a, b)[0]
    ub = profiler.mann_whitney(b, a)[0]
    assert ua + ub == len(a) * len(b)


@given(small_groups, small_groups)
def test_swap_flips_z_keeps_p(a, b):
    _, z1, p1 = profiler.mann_whitney(a, b)
    _, z2, p2 = profiler.mann_whitney(b, a)
    assert z1 == pytest.approx(-z2, abs=1e-12) and p1 == pytest.approx(p2, abs=1e-15)


@given(small_groups, small_groups)
def test_rank_statistic_invariant_to_monotone_transform(a, b):
    _, z1, _ = profiler.mann_whitney(a, b)
    _, z2, _ = profiler.mann_whitney(np.exp(a) * 3 + 1, np.exp(b) * 3 + 1)
    assert z1 == pytest.approx(z2, abs=1e-12)


@pytest.mark.parametrize("z, N, r", [(0.0, 10, 0.0), (3.0, 9, 1.0), (2.5, 100, 0.25), (-2.5, 100, 0.25)])
def test_effect_size_r(z, N, r):
    assert profiler.effect_size_r(z, N) == r


def _grid_space(pixels, R=10):
    pixels = np.asarray(pixels, dtype=np.int64)
    return dls.DiscreteLatentSpace(R, dls.Normalization(np.zeros(2), np.ones(2)), pixels,
                                   tuple(f"o{i}" for i in range(len(pixels))))


def _cluster(pixels, sign=1):
    return Cluster(1, sign, np.asarray(pixels, dtype=np.int64), 0.5, tuple(pixels[0]), 0.01)


def test_members_by_pixel_containment():
    space = _grid_space([[2, 2], [2, 2], [2, 2], [5, 5], [7, 1]])
    inside = profiler.cluster_members(_cluster([[2, 2]]), space)
    assert inside.tolist() == [True, True, True, False, False]
    assert not profiler.cluster_members(_cluster([[0, 9]]), space).any()


def test_unoccupied_cluster_not_profilable():
    space = _grid_space([[1, 1]] * 6 + [[5, 5]] * 6)
    X = FeatureMatrix(np.zeros((12, 2)), space.obs_ids, ("a", "b"))
    with pytest.raises(profiler.ProfileError, match="not profilable"):
        profiler.cluster_profile(_cluster([[9, 9]]), X, space)
    with pytest.raises(profiler.ProfileError, match="need >= 7"):
        profiler.cluster_profile(_cluster([[1, 1]]), X, space, min_members=7)


def _blob_profile(seed):
    """Profile of blob 1 vs blob 0 with membership given by construction."""
    X, y = two_blobs(seed=seed)
    pix = np.where(y.values[:, None] == 1, [[8, 8]], [[1, 1]])
    space = dls.DiscreteLatentSpace(10, dls.Normalization(np.zeros(2), np.ones(2)), pix.astype(np.int64), X.obs_ids)
    return profiler.cluster_profile(_cluster([[8, 8]]), X, space)


@pytest.mark.parametrize("seed", range(3))
def test_blob_construction_recovers_shifted_features(seed):
    prof = _blob_profile(seed)
    assert prof.n_in == prof.n_out == 200
    assert sorted(prof.top_features(2)) == [3, 7]
    assert np.all(prof.r[[3, 7]] >= 0.3)
    assert np.all(np.delete(prof.r, [3, 7]) < 0.1)
    assert prof.direction[3] == prof.direction[7] == 1
    assert prof.sufficient


def test_identical_feature_is_neutral():
    space = _grid_space([[1, 1]] * 6 + [[5, 5]] * 6)
    X = FeatureMatrix(np.column_stack([np.ones(12), np.arange(12.0)]), space.obs_ids, ("flat", "ramp"))
    prof = profiler.cluster_profile(_cluster([[5, 5]]), X, space)
    assert prof.r[0] == 0.0 and prof.direction[0] == 0
    assert prof.direction[1] == 1 and prof.signed_r()[1] > 0


def test_swapping_inside_and_outside_flips_direction():
    space = _grid_space([[1, 1]] * 6 + [[5, 5]] * 6)
    rng = np.random.default_rng(0)
    X = FeatureMatrix(rng.normal(size=(12, 3)), space.obs_ids, ("a", "b", "c"))
    p1 = profiler.cluster_profile(_cluster([[5, 5]]), X, space)
    p2 = profiler.cluster_profile(_cluster([[1, 1]]), X, space)
    assert np.allclose(p1.r, p2.r, atol=1e-12) and np.allclose(p1.p, p2.p, atol=1e-15)
    assert np.array_equal(p1.direction, -p2.direction)


def test_insufficient_effect_status():
    space = _grid_space([[1, 1], [5, 5]] * 6)
    X = FeatureMatrix(np.tile([[0.0], [0.0]], (6, 1)) + np.arange(12.0)[:, None] // 2, space.obs_ids, ("a",))
    prof = profiler.cluster_profile(_cluster([[5, 5]]), X, space)
    assert not prof.sufficient and prof.summary()["status"] == "insufficient effect size"


def test_profile_csv_and_tensor_rmap(tmp_path):
    space = _grid_space([[1, 1]] * 6 + [[5, 5]] * 6)
    rng = np.random.default_rng(1)
    v = rng.normal(size=(12, 6))
    v[6:, 0] += 5
    X = FeatureMatrix(v, space.obs_ids, tuple(f"px{j}" for j in range(6)), (2, 3))
    prof = profiler.cluster_profile(_cluster([[5, 5]]), X, space)
    profiler.write_profiles_csv(tmp_path / "p.csv", [prof])
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "cluster_id,feature_name,U,z,p,r,direction,n_in,n_out"
    assert len(lines) == 7 and lines[1].startswith("pos1,px0,")
    files = profiler.export_rmap(prof, tmp_path / "rm")
    assert sorted(files) == sorted(str(tmp_path / f"rm.{e}") for e in ("f32", "json", "pgm"))
    back = load_tensor_dataset(tmp_path / "rm.f32", tmp_path / "rm.json")
    assert back.tensor_shape == (2, 3)
    assert np.allclose(back.values[0], prof.signed_r().astype(np.float32))
    img = read_pgm(tmp_path / "rm.pgm")
    assert img.shape == (2, 3) and img[0, 0] > 128
