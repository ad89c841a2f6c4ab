import numpy as np
import pytest

from data_model import Parcellation, SparseConnectivity, ValidationError
from profiles import aggregate_profiles, write_profiles


def random_connectivity(n, density, seed):
    rng = np.random.default_rng(seed)
    i, j = np.triu_indices(n)
    keep = rng.random(i.size) < density
    return SparseConnectivity(n, i[keep], j[keep], rng.random(keep.sum()) + 0.1)


def test_profiles_match_dense_sum():
    conn = random_connectivity(30, 0.3, seed=1)
    seg = Parcellation(np.random.default_rng(2).integers(1, 5, size=30), 4)
    P = aggregate_profiles(conn, seg).to_dense()
    W = conn.matrix.toarray()
    expected = np.zeros((30, 4))
    for i in range(30):
        for j in range(30):
            expected[i, seg.labels[j] - 1] += W[i, j]
    assert np.allclose(P, expected, rtol=1e-12, atol=0)


def test_row_totals_equal_strengths_with_self_loops():
    conn = SparseConnectivity(3, [0, 0, 1], [0, 2, 1], [5.0, 1.0, 2.0])
    seg = Parcellation([1, 2, 2], 2)
    profiles = aggregate_profiles(conn, seg)
    assert profiles.to_dense().tolist() == [[5.0, 1.0], [0.0, 2.0], [1.0, 0.0]]
    assert np.array_equal(profiles.row_totals(), conn.strengths())


def test_empty_region_gives_zero_column():
    conn = random_connectivity(10, 0.5, seed=3)
    profiles = aggregate_profiles(conn, Parcellation([1] * 5 + [3] * 5, 3))
    assert profiles.m == 3
    assert not profiles.to_dense()[:, 1].any()


def test_size_mismatch():
    with pytest.raises(ValidationError, match="dimension mismatch"):
        aggregate_profiles(SparseConnectivity.empty(4), Parcellation([1, 1, 2], 2))


def test_write_profiles(tmp_path):
    conn = SparseConnectivity(2, [0], [1], [0.5])
    path = tmp_path / "p.tsv"
    write_profiles(aggregate_profiles(conn, Parcellation([1, 2], 2)), str(path))
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["voxel", "region_1", "region_2"]
    assert lines[1].split("\t") == ["0", "0", "0.5"]


def test_refined_segmentation_sums_back_to_parent():
    conn = random_connectivity(40, 0.3, seed=4)
    fine = Parcellation(np.random.default_rng(5).integers(1, 9, size=40), 8)
    parent_of = np.array([1, 1, 2, 2, 2, 3, 3, 1])
    coarse = Parcellation(parent_of[fine.labels - 1], 3)
    P_fine = aggregate_profiles(conn, fine).to_dense()
    P_coarse = aggregate_profiles(conn, coarse).to_dense()
    summed = np.stack([P_fine[:, parent_of == c].sum(axis=1) for c in (1, 2, 3)], axis=1)
    assert np.allclose(summed, P_coarse, rtol=1e-12, atol=0)


def test_relabeling_permutes_columns():
    conn = random_connectivity(25, 0.4, seed=6)
    seg = Parcellation(np.random.default_rng(7).integers(1, 5, size=25), 4)
    perm = np.array([3, 1, 4, 2])
    relabeled = Parcellation(perm[seg.labels - 1], 4)
    P = aggregate_profiles(conn, seg).to_dense()
    Q = aggregate_profiles(conn, relabeled).to_dense()
    assert np.array_equal(Q[:, perm - 1], P)
