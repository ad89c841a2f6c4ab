import math

import numpy as np
import pytest

from data_model import BrainMask, Parcellation, ValidationError, read_connectivity, read_mask, read_parcellation
from metrics import nmi
from profiles import aggregate_profiles
from spatial_graph import build_spatial_edges, weight_edges
from synth import (
    SynthSpec,
    generate,
    perturb_parcellation,
    planted_regions,
    random_parcellation,
    signature_affinity,
    write_instance,
)

SMALL = SynthSpec(dims=(6, 4, 3), k_true=3, density=0.5, seed=2)


def test_instance_shapes_and_symmetry():
    instance = generate(SMALL)
    assert instance.mask.n == 72
    assert instance.truth.sizes.tolist() == [24, 24, 24]
    dense = instance.conn.matrix.toarray()
    assert np.array_equal(dense, dense.T)
    assert (dense >= 0).all()
    assert not dense.diagonal().any()
    assert instance.affinity.diagonal().all()
    assert np.unique(instance.affinity, axis=0).shape[0] == 3


def test_planted_regions_are_slabs_on_a_full_grid():
    instance = generate(SynthSpec(dims=(6, 2, 2), k_true=3))
    xs = instance.mask.coords[:, 0]
    for label in (1, 2, 3):
        assert set(xs[instance.truth.labels == label].tolist()) == {2 * label - 2, 2 * label - 1}


def test_planted_regions_are_boxes_at_full_size():
    mask = BrainMask.full((20, 20, 10))
    truth = planted_regions(mask, 5)
    assert sorted(truth.sizes.tolist()) == [720, 800, 800, 840, 840]
    for label in range(1, 6):
        coords = mask.coords[truth.labels == label]
        extent = coords.max(axis=0) - coords.min(axis=0) + 1
        assert int(np.prod(extent)) == len(coords)


def test_bisection_keeps_every_region_nonempty():
    for dims, k in [((3, 3, 1), 9), ((5, 1, 1), 4), ((4, 3, 2), 7)]:
        assert not planted_regions(BrainMask.full(dims), k).degenerate


def test_ring_signature():
    ring = signature_affinity(5)
    assert np.array_equal(ring, ring.T)
    assert ring.sum(axis=1).tolist() == [3] * 5
    assert np.unique(ring, axis=0).shape[0] == 5
    assert ring[0].tolist() == [True, True, False, False, True]
    assert np.array_equal(signature_affinity(3), np.eye(3, dtype=bool))
    assert np.array_equal(signature_affinity(6, "identity"), np.eye(6, dtype=bool))


def test_noiseless_profiles_are_constant_within_regions():
    instance = generate(SynthSpec(dims=(8, 4, 2), k_true=4, noise=0.0, density=1.0))
    values = aggregate_profiles(instance.conn, instance.truth).values.toarray()
    labels = instance.truth.labels
    for label in range(1, 5):
        rows = values[labels == label]
        assert (rows == rows[0]).all()
    graph = weight_edges(build_spatial_edges(instance.mask, 1), aggregate_profiles(instance.conn, instance.truth))
    same = labels[graph.rows] == labels[graph.cols]
    assert graph.weights[same] == pytest.approx(1.0, abs=1e-12)


def test_sampled_density_is_within_binomial_bounds():
    spec = SynthSpec(dims=(10, 10, 5), k_true=5, density=0.3, seed=3)
    instance = generate(spec)
    pairs = 500 * 499 / 2
    spread = math.sqrt(pairs * 0.3 * 0.7)
    assert abs(instance.sampled_pairs - 0.3 * pairs) <= 3 * spread
    assert instance.sampled_density == pytest.approx(instance.sampled_pairs / pairs)
    # between-region pairs with mean strength 0 are clamped away about half the time
    assert instance.conn.nnz < instance.sampled_pairs


def test_positive_between_strength_keeps_every_sampled_pair():
    instance = generate(SynthSpec(dims=(6, 4, 3), k_true=4, between_strength=0.5, noise=0.05, density=0.4, seed=2))
    assert instance.conn.nnz == instance.sampled_pairs


def test_within_region_pairs_are_stronger():
    spec = SynthSpec(dims=(6, 4, 3), k_true=3, density=1.0, signature="identity", noise=0.05, seed=1)
    instance = generate(spec)
    dense = instance.conn.matrix.toarray()
    same = instance.truth.labels[:, None] == instance.truth.labels[None, :]
    np.fill_diagonal(same, False)
    other = ~same
    np.fill_diagonal(other, False)
    assert dense[same].mean() == pytest.approx(1.0, abs=0.05)
    assert dense[other].mean() < 0.05


def test_generation_is_independent_of_thread_count():
    assert generate(SMALL, n_jobs=1).conn == generate(SMALL, n_jobs=3).conn


def test_invalid_spec():
    with pytest.raises(ValidationError, match="invalid spec"):
        SynthSpec(density=0.0)
    with pytest.raises(ValidationError, match="invalid spec"):
        SynthSpec(within_strength=0.5, between_strength=1.0)
    with pytest.raises(ValidationError, match="invalid spec"):
        SynthSpec(dims=(2, 2, 1), k_true=5)


@pytest.mark.parametrize("fraction", [0.0, 0.15, 0.5, 1.0])
def test_perturbation_flips_exact_count(fraction):
    base = planted_regions(generate(SMALL).mask, 3)
    flipped = perturb_parcellation(base, fraction, seed=4)
    assert int((flipped.labels != base.labels).sum()) == math.floor(fraction * base.n)


def test_perturbation_rejects_bad_fraction():
    with pytest.raises(ValidationError):
        perturb_parcellation(Parcellation([1, 2], 2), 1.5)


def test_random_parcellation_uses_every_label():
    parc = random_parcellation(20, 20, seed=3)
    assert sorted(parc.labels.tolist()) == list(range(1, 21))
    assert not random_parcellation(100, 7, seed=1).degenerate


def test_write_instance(tmp_path):
    instance = generate(SMALL)
    paths = write_instance(instance, str(tmp_path / "data"))
    mask = read_mask(paths["mask"])
    assert mask == instance.mask
    assert read_connectivity(paths["conn"], mask) == instance.conn
    assert read_parcellation(paths["truth"], mask) == instance.truth


def test_similarity_to_original_falls_with_flip_fraction():
    base = Parcellation(np.repeat(np.arange(1, 6), 40), 5)
    means = [
        np.mean([nmi(base, perturb_parcellation(base, f, seed=s)) for s in range(50)])
        for f in (0.05, 0.1, 0.2, 0.4)
    ]
    assert all(a > b for a, b in zip(means, means[1:]))
