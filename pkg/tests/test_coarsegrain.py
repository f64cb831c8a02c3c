import numpy as np
import pytest

from cgemu.coarsegrain import (
    CoarsenSpec,
    PairedDataset,
    SplitPlan,
    apply_standardizer,
    build_paired_dataset,
    fit_standardizer,
    invert_standardizer,
    spatial_block_mean,
    split_with_buffer,
    temporal_block_mean
)
from cgemu.dynsys import FineTrajectory
from cgemu.error_handlers import DatasetError, ValidationError


def test_spatial_block_mean_1d():
    result = spatial_block_mean(np.array([1.0, 2.0, 3.0, 4.0]), 2)
    np.testing.assert_array_equal(result, [1.5, 3.5])


def test_spatial_block_mean_constant_field():
    np.testing.assert_array_equal(
        spatial_block_mean(np.full((8, 8), 2.5), 4), np.full((2, 2), 2.5)
    )


def test_spatial_block_mean_matches_loop_oracle(rng):
    field = rng.integers(-50, 50, (2, 16, 16)).astype(np.float64)
    for values in field:
        expected = np.empty((2, 2))
        for bi in range(2):
            for bj in range(2):
                total = 0.0
                for i in range(8):
                    for j in range(8):
                        total += values[bi * 8 + i, bj * 8 + j]
                expected[bi, bj] = total / 64
        np.testing.assert_array_equal(
            spatial_block_mean(values, 8), expected
        )


def test_spatial_block_mean_requires_divisible_grid():
    with pytest.raises(DatasetError):
        spatial_block_mean(np.zeros(10), 3)


def test_temporal_block_mean():
    seq = np.array([[1.0], [3.0], [5.0], [7.0]])
    np.testing.assert_array_equal(temporal_block_mean(seq, 2), [[2.0], [6.0]])
    np.testing.assert_array_equal(temporal_block_mean(seq, 1), seq)


def test_temporal_block_mean_matches_loop_oracle(rng):
    seq = rng.integers(-20, 20, (20, 3)).astype(np.float64)
    expected = np.array([
        [sum(seq[w * 5 + i, k] for i in range(5)) / 5 for k in range(3)]
        for w in range(4)
    ])
    np.testing.assert_array_equal(temporal_block_mean(seq, 5), expected)


def test_temporal_block_mean_requires_divisible_length():
    with pytest.raises(DatasetError):
        temporal_block_mean(np.zeros((7, 2)), 2)


def test_ks_paired_dataset_shapes_and_consistency(rng):
    states = rng.integers(-9, 9, (50, 100)).astype(np.float64)
    fine = FineTrajectory(states, 0.002, 'ks', {'fields': 1, 'shape': (100,)})
    ds = build_paired_dataset(fine, CoarsenSpec('ks', 5, 5))
    assert ds.X.shape == (10, 20), 'X должен иметь форму [10 x 20].'
    assert ds.Y.shape == (10, 100), 'Y должен иметь форму [10 x 100].'
    assert ds.m == 5 and ds.dt_coarse == pytest.approx(0.01)
    for t in range(10):
        np.testing.assert_allclose(
            spatial_block_mean(ds.Y[t], 5), ds.X[t], rtol=0, atol=1e-12
        )
    assert ds.X.mean() == pytest.approx(states.mean(), abs=1e-10), (
        'Огрубление должно сохранять глобальное среднее.'
    )


def test_identity_coarsening(rng):
    states = rng.standard_normal((6, 12))
    fine = FineTrajectory(states, 0.002, 'ks', {'fields': 1, 'shape': (12,)})
    ds = build_paired_dataset(fine, CoarsenSpec('ks', 1, 1))
    np.testing.assert_array_equal(ds.X, ds.Y)


def test_brusselator_paired_dataset(rng):
    states = rng.standard_normal((10, 2 * 16 * 16))
    fine = FineTrajectory(
        states, 0.002, 'brusselator', {'fields': 2, 'shape': (16, 16)}
    )
    ds = build_paired_dataset(fine, CoarsenSpec('brusselator', 5, 8))
    assert ds.X.shape == (2, 8), 'Два поля по 2 x 2 блока дают d = 8.'
    assert ds.m == 64
    u = ds.Y[0, :256].reshape(16, 16)
    np.testing.assert_allclose(
        ds.X[0, :4], spatial_block_mean(u, 8).ravel(), atol=1e-12
    )


def test_l96_separates_slow_and_fast(rng):
    states = rng.standard_normal((4, 8 + 256))
    fine = FineTrajectory(
        states, 0.005, 'l96', {'slow': 8, 'fast_per_slow': 32}
    )
    ds = build_paired_dataset(fine, CoarsenSpec('l96'))
    np.testing.assert_array_equal(ds.X, states[:, :8])
    np.testing.assert_array_equal(ds.Y, states[:, 8:])
    assert ds.m == 32


def test_system_mismatch_rejected(rng):
    fine = FineTrajectory(
        rng.standard_normal((4, 12)), 0.002, 'ks',
        {'fields': 1, 'shape': (12,)},
    )
    with pytest.raises(DatasetError):
        build_paired_dataset(fine, CoarsenSpec('brusselator', 1, 1))


def _indexed(length):
    X = np.arange(length, dtype=np.float64)[:, None]
    return PairedDataset(X, X.copy(), 0.1, 'ks', 1)


def test_split_with_buffer():
    train, val, holdout = split_with_buffer(
        _indexed(100), SplitPlan(60, 15, 15, 5)
    )
    assert train.X[[0, -1], 0].tolist() == [0, 59]
    assert val.X[[0, -1], 0].tolist() == [65, 79]
    assert holdout.X[[0, -1], 0].tolist() == [85, 99]


def test_split_without_buffer_is_adjacent():
    train, val, holdout = split_with_buffer(
        _indexed(30), SplitPlan(10, 10, 10)
    )
    assert val.X[0, 0] == train.X[-1, 0] + 1
    assert holdout.X[0, 0] == val.X[-1, 0] + 1


def test_split_must_fit():
    with pytest.raises(DatasetError):
        split_with_buffer(_indexed(50), SplitPlan(30, 10, 10, 5))


def test_split_plan_rejects_empty_segment():
    with pytest.raises(ValidationError):
        SplitPlan(0, 10, 10)


def test_split_does_not_read_y():
    ds = _indexed(100)
    split_with_buffer(ds, SplitPlan(60, 15, 15, 5))
    assert ds.y_reads == 0, 'Разбиение не должно обращаться к блоку Y.'


def test_standardizer_round_trip(rng):
    X = rng.normal(3.0, 2.0, (50, 4))
    Y = rng.normal(-1.0, 5.0, (50, 8))
    ds = PairedDataset(X, Y, 0.1, 'ks', 2)
    standardizer = fit_standardizer(ds)
    scaled = apply_standardizer(ds, standardizer)
    np.testing.assert_allclose(scaled.X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled.X.std(axis=0), 1.0, atol=1e-12)
    restored = invert_standardizer(scaled, standardizer)
    np.testing.assert_allclose(restored.X, X, rtol=0, atol=1e-12)
    np.testing.assert_allclose(restored.Y, Y, rtol=0, atol=1e-12)


def test_constant_dimension_gets_unit_scale(rng):
    X = np.column_stack([np.full(20, 4.0), rng.standard_normal(20)])
    ds = PairedDataset(X, None, 0.1, 'ks', 1)
    standardizer = fit_standardizer(ds)
    assert standardizer.x_scale[0] == 1.0, (
        'Для постоянной размерности масштаб должен быть равен 1.'
    )
    scaled = apply_standardizer(ds, standardizer)
    np.testing.assert_array_equal(scaled.X[:, 0], 0.0)


def test_round_off_spread_counts_as_constant(rng):
    column = np.full(20, 4.0)
    column[::2] = np.nextafter(4.0, 5.0)
    X = np.column_stack([column, rng.standard_normal(20)])
    Y = np.column_stack([-column, rng.standard_normal(20)])
    ds = PairedDataset(X, Y, 0.1, 'ks', 1)
    standardizer = fit_standardizer(ds)
    assert standardizer.x_scale[0] == 1.0, (
        'Разброс на уровне ошибок округления не должен считаться масштабом.'
    )
    assert standardizer.y_scale[0] == 1.0
    assert standardizer.x_scale[1] != 1.0
    scaled = apply_standardizer(ds, standardizer)
    np.testing.assert_allclose(scaled.X[:, 0], 0.0, rtol=0, atol=1e-12)


def test_y_access_is_tracked(rng):
    ds = PairedDataset(rng.standard_normal((5, 2)), None, 0.1, 'ks', 1)
    with pytest.raises(DatasetError):
        ds.Y
    assert ds.y_reads == 1
