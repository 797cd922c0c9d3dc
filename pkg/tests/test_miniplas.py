import itertools

import numpy as np
import pytest

from gsmc import miniplas
from gsmc.errors import ConfigError
from gsmc.mapping import build_feature_grid, compute_ranges, feature_matrix, feature_weights, quantize_groups
from gsmc.models import PADDING, FeatureGrid, GridLayout, PlasSchedule
from gsmc.morton import build_layout, sort_by_morton
from gsmc.pca import fit, project
from gsmc.synthetic import generate_cloud


def make_grid(planes) -> FeatureGrid:
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 2:
        planes = planes[np.newaxis]
    return FeatureGrid(planes=planes, weights=np.ones(planes.shape[0]))


def identity_layout(side: int, n_real: int | None = None) -> GridLayout:
    n_real = side * side if n_real is None else n_real
    return build_layout(n_real) if n_real < side * side else GridLayout(
        side=side, order=np.arange(side * side, dtype=np.int64), n_real=n_real
    )


def naive_smoothness(grid: FeatureGrid) -> float:
    side = grid.side
    total = 0.0
    pairs = 0
    for row in range(side):
        for col in range(side):
            for d_row, d_col in ((0, 1), (1, 0)):
                r, c = row + d_row, col + d_col
                if r < side and c < side:
                    pairs += 1
                    diff = grid.planes[:, row, col] - grid.planes[:, r, c]
                    total += float(np.dot(grid.weights, diff * diff))
    return total / pairs if pairs else 0.0


def clustered_grid(count: int, seed: int):
    cloud = generate_cloud(count, seed=seed)
    coeffs = project(fit(cloud.sh_ac, mode="joint").truncated(12), cloud.sh_ac)
    params = compute_ranges(cloud, coeffs)
    quantized = quantize_groups(cloud, coeffs, params)
    layout = build_layout(cloud.n).relabel(sort_by_morton(cloud, params))
    grid = build_feature_grid(feature_matrix(quantized, params), layout, feature_weights(12))
    return grid, layout


def test_smoothness_examples():
    assert miniplas.smoothness_cost(make_grid(np.full((4, 4), 0.3))) == 0.0
    assert miniplas.smoothness_cost(make_grid([[0, 1], [0, 1]])) == pytest.approx(0.5)
    assert miniplas.smoothness_cost(make_grid([[0.7]])) == 0.0


def test_smoothness_matches_naive_oracle():
    rng = np.random.default_rng(0)
    grid = FeatureGrid(planes=rng.random((3, 8, 8)), weights=rng.random(3))
    assert miniplas.smoothness_cost(grid) == pytest.approx(naive_smoothness(grid), abs=1e-9)


def test_blur_target_matches_direct_convolution():
    rng = np.random.default_rng(1)
    planes = rng.random((2, 5, 5))
    blurred = miniplas.blur_target(make_grid(planes)).planes
    padded = np.pad(planes, ((0, 0), (1, 1), (1, 1)), mode="edge")
    for row in range(5):
        for col in range(5):
            expected = padded[:, row:row + 3, col:col + 3].mean(axis=(1, 2))
            assert np.allclose(blurred[:, row, col], expected)


def test_blur_of_single_spike():
    planes = np.zeros((3, 3))
    planes[1, 1] = 1.0
    blurred = miniplas.blur_target(make_grid(planes)).planes[0]
    assert np.allclose(blurred, 1.0 / 9.0)


def test_blur_keeps_constants_but_is_not_idempotent():
    constant = make_grid(np.full((4, 4), 0.25))
    assert np.allclose(miniplas.blur_target(constant).planes, 0.25)

    grid = make_grid(np.random.default_rng(2).random((8, 8)))
    once = miniplas.blur_target(grid)
    assert not np.allclose(miniplas.blur_target(once).planes, once.planes)


def test_constant_grid_pass_changes_nothing():
    grid = make_grid(np.full((8, 8), 0.5))
    layout = identity_layout(8)
    new_grid, new_layout, delta, ops = miniplas.optimize_pass(grid, layout, 4, np.random.default_rng(0))
    assert np.array_equal(new_grid.planes, grid.planes)
    assert np.array_equal(new_layout.order, layout.order)
    assert delta == 0.0
    assert ops == 4 * 4 * 24


@pytest.mark.parametrize("side, block, expected", [
    (64, 4, 16 * 16 * 4 * 24),
    (64, 8, 8 * 8 * 16 * 24),
    (256, 16, 16 * 16 * 64 * 24),
    (1024, 4, 6_291_456),
])
def test_op_count_formula(side, block, expected):
    assert miniplas.pass_op_count(side, block) == expected


def test_op_count_reported_by_pass():
    grid = make_grid(np.random.default_rng(3).random((64, 64)))
    _, _, _, ops = miniplas.optimize_pass(grid, identity_layout(64), 8, np.random.default_rng(0))
    assert ops == (64 // 8) ** 2 * (64 // 4) * 24


def test_pass_matches_exhaustive_search_for_each_group():
    rng = np.random.default_rng(4)
    grid = FeatureGrid(planes=rng.random((2, 4, 4)), weights=np.array([1.0, 0.5]))
    layout = identity_layout(4)
    target = miniplas.blur_target(grid).planes.reshape(2, -1)
    features = grid.planes.reshape(2, -1)

    groups = miniplas._group_pixels(4, 4, np.random.default_rng(9))
    new_grid, new_layout, delta, _ = miniplas.optimize_pass(grid, layout, 4, np.random.default_rng(9))
    new_features = new_grid.planes.reshape(2, -1)

    expected_delta = 0.0
    for group in groups:
        costs = []
        for perm in itertools.permutations(range(4)):
            moved = features[:, group[list(perm)]]
            costs.append(float(np.sum(grid.weights[:, None] * (moved - target[:, group]) ** 2)))
        best = int(np.argmin(costs))
        perm = list(itertools.permutations(range(4)))[best]
        assert np.array_equal(new_features[:, group], features[:, group[list(perm)]])
        assert np.array_equal(new_layout.order[group], layout.order[group[list(perm)]])
        expected_delta += costs[best] - costs[0]
    assert delta == pytest.approx(expected_delta)
    assert delta <= 0.0


def test_pass_never_raises_frozen_target_cost():
    rng = np.random.default_rng(5)
    grid = make_grid(rng.random((3, 16, 16)))
    target = miniplas.blur_target(grid)
    new_grid, _, delta, _ = miniplas.optimize_pass(grid, identity_layout(16), 4, rng)
    before = miniplas.target_distance(grid, target)
    after = miniplas.target_distance(new_grid, target)
    assert after <= before + 1e-12
    assert after - before == pytest.approx(delta)


def test_padding_stays_on_padding_cells():
    grid, layout = clustered_grid(700, seed=1)
    padding = ~layout.valid
    schedule = PlasSchedule(mbs=16, seed=3)
    _, refined, _ = miniplas.run_miniplas(grid, layout, schedule)
    assert np.array_equal(~refined.valid, padding)
    assert np.all(refined.order[padding] == PADDING)
    assert sorted(refined.order[refined.valid].tolist()) == list(range(700))


def test_block_size_must_divide_grid():
    grid = make_grid(np.zeros((8, 8)))
    with pytest.raises(ConfigError):
        miniplas.optimize_pass(grid, identity_layout(8), 16, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        miniplas.optimize_pass(grid, identity_layout(8), 6, np.random.default_rng(0))


def test_schedule_enumerates_halving_block_sizes():
    assert PlasSchedule(mbs=64).block_sizes == [64, 32, 16, 8, 4]
    assert PlasSchedule(mbs=4).block_sizes == [4]
    assert PlasSchedule(mbs=8, iterations_per_size=2).passes() == [8, 8, 4, 4]
    assert PlasSchedule(explicit_sizes=(8, 4)).block_sizes == [8, 4]
    with pytest.raises(ConfigError):
        PlasSchedule(mbs=12)


def test_schedule_is_clipped_to_small_grids():
    grid = make_grid(np.random.default_rng(6).random((8, 8)))
    _, _, report = miniplas.run_miniplas(grid, identity_layout(8), PlasSchedule(mbs=64))
    assert [record.block_size for record in report.passes] == [8, 4]

    tiny = make_grid(np.random.default_rng(6).random((2, 2)))
    _, _, report = miniplas.run_miniplas(tiny, identity_layout(2), PlasSchedule(mbs=4))
    assert report.passes == []
    assert report.final_cost == report.initial_cost


def test_constant_grid_run_keeps_zero_cost():
    grid = make_grid(np.full((8, 8), 1.0))
    _, _, report = miniplas.run_miniplas(grid, identity_layout(8), PlasSchedule(mbs=4))
    assert report.initial_cost == 0.0
    assert report.final_cost == 0.0


def test_run_is_deterministic_for_a_seed():
    grid, layout = clustered_grid(1000, seed=2)
    first = miniplas.run_miniplas(grid, layout, PlasSchedule(mbs=8, seed=11))
    second = miniplas.run_miniplas(grid, layout, PlasSchedule(mbs=8, seed=11))
    assert np.array_equal(first[0].planes, second[0].planes)
    assert np.array_equal(first[1].order, second[1].order)


@pytest.mark.parametrize("mbs", [4, 8, 16])
def test_runs_reduce_cost_and_keep_a_permutation(mbs):
    decreased = 0
    for seed in range(10):
        grid, layout = clustered_grid(128 * 128, seed=seed)
        new_grid, new_layout, report = miniplas.run_miniplas(grid, layout, PlasSchedule(mbs=mbs, seed=seed))
        assert sorted(new_layout.order[new_layout.valid].tolist()) == list(range(128 * 128))
        for record in report.passes:
            assert record.target_cost_after <= record.target_cost_before + 1e-9
        assert report.final_cost <= report.initial_cost
        assert report.final_cost == pytest.approx(miniplas.smoothness_cost(new_grid))
        decreased += report.final_cost < report.initial_cost
    assert decreased >= 9


def test_mbs4_pass_reduces_cost_on_random_clouds():
    for seed in range(10):
        cloud_grid, layout = clustered_grid(1024, seed=100 + seed)
        _, _, report = miniplas.run_miniplas(cloud_grid, layout, PlasSchedule(mbs=4, seed=seed))
        assert report.final_cost < report.initial_cost


def test_pass_that_grows_coded_size_is_reverted(caplog):
    grid, layout = clustered_grid(1024, seed=3)
    baseline = layout.order.copy()

    def coded_size(candidate: GridLayout) -> int:
        return 100 if np.array_equal(candidate.order, baseline) else 101

    with caplog.at_level("WARNING"):
        new_grid, new_layout, report = miniplas.run_miniplas(grid, layout, PlasSchedule(mbs=4, seed=1), coded_size)
    assert report.passes
    assert all(not record.accepted for record in report.passes)
    assert np.array_equal(new_layout.order, baseline)
    assert np.array_equal(new_grid.planes, grid.planes)
    assert report.final_cost == report.initial_cost
    assert report.initial_bytes == report.final_bytes == 100
    assert report.passes[0].bytes_after == 101
    assert "grew the coded maps" in caplog.text


def test_pass_that_shrinks_coded_size_is_kept():
    grid, layout = clustered_grid(1024, seed=3)
    baseline = layout.order.copy()

    def coded_size(candidate: GridLayout) -> int:
        return 100 if np.array_equal(candidate.order, baseline) else 90

    _, new_layout, report = miniplas.run_miniplas(grid, layout, PlasSchedule(mbs=4, seed=1), coded_size)
    assert report.passes[0].accepted
    assert not np.array_equal(new_layout.order, baseline)
    assert report.final_bytes == 90
    assert report.as_json()["final_bytes"] == 90
