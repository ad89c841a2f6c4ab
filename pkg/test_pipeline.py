import time

import pytest

from data_model import BrainMask, Parcellation, ValidationError, write_segmentation
from metrics import dice, nmi, random_baseline
from pipeline import (
    PipelineParams,
    compare_initializations,
    grid_segmentation,
    iterate_parcellation,
    parse_init_mode,
    random_spatial_segmentation,
    synthetic_segmentation,
    write_trace,
)
from synth import SynthSpec, generate

# slabs of three x-planes line up with 3-voxel grid cubes
PLANTED = SynthSpec(dims=(9, 6, 4), k_true=3, noise=0.1, density=0.3, seed=1)


@pytest.fixture(scope="module")
def planted():
    return generate(PLANTED)


def test_params_validation():
    with pytest.raises(ValidationError, match="k must be ≥ 1"):
        PipelineParams(k=0)
    with pytest.raises(ValidationError):
        PipelineParams(k=2, stop_threshold=0.0)
    with pytest.raises(ValidationError):
        PipelineParams(k=2, measure="euclid")


def test_grid_segmentation_counts():
    seg = grid_segmentation(BrainMask.full((4, 4, 4)), 2)
    assert seg.k == 8
    assert seg.sizes.tolist() == [8] * 8
    sparse = BrainMask([(0, 0, 0), (3, 3, 3)], (4, 4, 4))
    assert grid_segmentation(sparse, 2).k == 2


def test_random_segmentation_is_spatial_and_seeded():
    mask = BrainMask.full((6, 6, 6))
    a = random_spatial_segmentation(mask, 8, seed=3)
    b = random_spatial_segmentation(mask, 8, seed=3)
    assert a == b
    assert a.k == 8
    assert not a.degenerate
    with pytest.raises(ValidationError):
        random_spatial_segmentation(mask, mask.n + 1)


def test_parse_init_modes(tmp_path, planted):
    params = PipelineParams(k=3)
    mask = planted.mask
    assert parse_init_mode("grid:3", mask, params).k == 12
    assert parse_init_mode("random:10", mask, params).k == 10
    path = str(tmp_path / "seg.parc")
    write_segmentation(planted.truth, mask, path)
    assert parse_init_mode(f"file:{path}", mask, params) == planted.truth
    for bad in ("grid", "grid:x", "random:0", "voronoi:3", "synthetic:2"):
        with pytest.raises(ValidationError):
            parse_init_mode(bad, mask, params)


def test_synthetic_segmentation_is_contiguous_halves():
    mask = BrainMask.full((8, 2, 2))
    seg = synthetic_segmentation(mask, 2, PipelineParams(k=2, radius=1))
    xs = mask.coords[:, 0]
    assert set(xs[seg.labels == 1].tolist()) == {0, 1, 2, 3}
    assert set(xs[seg.labels == 2].tolist()) == {4, 5, 6, 7}


def test_recovers_planted_regions(planted):
    params = PipelineParams(k=3, seed=7)
    init = grid_segmentation(planted.mask, 3)
    parc, trace = iterate_parcellation(planted.conn, planted.mask, init, params)
    assert nmi(parc, planted.truth) >= 0.9
    assert 1 <= len(trace) <= params.max_iterations
    assert trace.converged
    assert trace.records[-1].nmi_prev >= params.stop_threshold
    assert trace.records[0].profile_columns == 12
    assert all(r.profile_columns == 3 for r in trace.records[1:])
    baseline = random_baseline([parc], trials=20, metric="dice", seed=0)
    assert dice(parc, planted.truth) - baseline >= 0.15


def test_runs_are_reproducible(planted):
    init = grid_segmentation(planted.mask, 3)
    a = iterate_parcellation(planted.conn, planted.mask, init, PipelineParams(k=3, seed=5))
    b = iterate_parcellation(planted.conn, planted.mask, init, PipelineParams(k=3, seed=5, n_jobs=2))
    assert a[0] == b[0]
    assert a[1].to_frame().equals(b[1].to_frame())


def test_inconsistent_inputs(planted):
    with pytest.raises(ValidationError, match="inconsistent inputs"):
        iterate_parcellation(planted.conn, planted.mask, Parcellation([1, 2], 2), PipelineParams(k=2))


def test_max_iterations_without_early_stop(planted):
    params = PipelineParams(k=3, max_iterations=3, early_stop=False)
    _, trace = iterate_parcellation(planted.conn, planted.mask, grid_segmentation(planted.mask, 3), params)
    assert [r.iteration for r in trace.records] == [1, 2, 3]


def test_trace_file(tmp_path, planted):
    params = PipelineParams(k=3, max_iterations=2, early_stop=False)
    _, trace = iterate_parcellation(planted.conn, planted.mask, grid_segmentation(planted.mask, 3), params)
    path = tmp_path / "trace.tsv"
    write_trace(trace, str(path))
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["iter", "nmi_prev", "dice_prev", "converged"]
    assert len(lines) == 3


def test_initializations_agree(planted):
    params = PipelineParams(k=3, max_iterations=4, seed=2)
    inits = {
        "grid:3": parse_init_mode("grid:3", planted.mask, params),
        "random:15": parse_init_mode("random:15", planted.mask, params),
        "random:30": parse_init_mode("random:30", planted.mask, params),
    }
    traces, pairs, curve = compare_initializations(planted.conn, planted.mask, inits, params)
    assert set(traces) == set(inits)
    assert len(pairs) == 4 * 3
    assert curve["iteration"].tolist() == [1, 2, 3, 4]
    final = pairs[pairs["iteration"] == 4]
    assert (final["nmi"] >= 0.9).all()
    assert (final["dice"] >= 0.8).all()


FULL = SynthSpec(dims=(20, 20, 10), k_true=5, noise=0.1, density=0.3, seed=1)


@pytest.fixture(scope="module")
def full_instance():
    return generate(FULL, n_jobs=2)


@pytest.mark.slow
def test_recovers_planted_regions_at_full_size(full_instance):
    params = PipelineParams(k=5, seed=0, n_jobs=2)
    init = grid_segmentation(full_instance.mask, 5)
    parc, trace = iterate_parcellation(full_instance.conn, full_instance.mask, init, params)
    assert nmi(parc, full_instance.truth) >= 0.9
    assert len(trace) <= 10


@pytest.mark.slow
def test_initializations_agree_at_full_size(full_instance):
    params = PipelineParams(k=5, seed=0, n_jobs=2)
    mask, conn = full_instance.mask, full_instance.conn
    finals = {}
    for mode in ("grid:5", "random:90", "random:200", "synthetic"):
        parc, trace = iterate_parcellation(conn, mask, parse_init_mode(mode, mask, params), params)
        assert trace.converged
        assert trace.records[-1].nmi_prev >= 0.95
        finals[mode] = parc
    names = list(finals)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            assert nmi(finals[names[a]], finals[names[b]]) >= 0.9
            assert dice(finals[names[a]], finals[names[b]]) >= 0.8


@pytest.mark.slow
def test_ten_thousand_voxels_with_forty_regions_in_time():
    instance = generate(SynthSpec(dims=(25, 20, 20), k_true=40, density=0.05, seed=2), n_jobs=4)
    params = PipelineParams(k=40, seed=0, n_jobs=4)
    started = time.perf_counter()
    parc, trace = iterate_parcellation(
        instance.conn, instance.mask, grid_segmentation(instance.mask, 5), params
    )
    assert time.perf_counter() - started < 120
    assert parc.n == 10_000
    assert 1 <= len(trace) <= params.max_iterations
