import numpy as np
import pytest

from cgemu.constants import HALF_LOG_2PI
from cgemu.error_handlers import ValidationError
from cgemu.evaluation import (
    PER_SEED_HEADER,
    SUMMARY_HEADER,
    Ensemble,
    SeedScore,
    confidence_interval_95,
    forecast_ensemble,
    forecast_error,
    forecast_spread,
    holdout_loglik,
    moving_average,
    per_seed_rows,
    prepare_inits,
    summarize_forecast,
    summarize_sweep,
    tl_benefit_indicator
)
from cgemu.seqmodel import HEAD_X, RolloutConfig, nll_lowres, rollout


def _zero_head_x(model):
    for name in model.store.group(HEAD_X):
        model.store[name][...] = 0.0


def test_holdout_loglik_zero_model(small_model):
    _zero_head_x(small_model)
    assert holdout_loglik(small_model, np.zeros((20, 3))) == pytest.approx(
        -3 * HALF_LOG_2PI, abs=1e-12
    )


def test_holdout_loglik_is_negative_nll(small_model, rng):
    X = rng.standard_normal((30, 3))
    assert holdout_loglik(small_model, X) == -nll_lowres(small_model, X)


def test_confidence_interval_cases(rng):
    assert confidence_interval_95([0.5] * 16) == (0.5, 0.0)
    mean, half_width = confidence_interval_95([-1.0, 1.0])
    assert mean == 0.0
    assert half_width == pytest.approx(1.96, abs=1e-12)
    small = confidence_interval_95(rng.standard_normal(100))[1]
    large = confidence_interval_95(rng.standard_normal(10_000))[1]
    assert large / small == pytest.approx(0.1, rel=0.2), (
        'Полуширина интервала должна убывать как 1 / sqrt(n).'
    )


def test_confidence_interval_needs_two_values():
    with pytest.raises(ValidationError):
        confidence_interval_95([1.0])


def _error_oracle(members, truth):
    M, N, T, d = members.shape
    result = np.empty(T)
    for t in range(T):
        total = 0.0
        for m in range(M):
            for k in range(d):
                mean = sum(members[m, n, t, k] for n in range(N)) / N
                total += (truth[m, t, k] - mean) ** 2
        result[t] = np.sqrt(total / (M * d))
    return result


def _spread_oracle(members):
    M, N, T, d = members.shape
    result = np.empty(T)
    for t in range(T):
        total = 0.0
        for m in range(M):
            for k in range(d):
                mean = sum(members[m, n, t, k] for n in range(N)) / N
                for n in range(N):
                    total += (members[m, n, t, k] - mean) ** 2
        result[t] = np.sqrt(total / (M * N * d))
    return result


def test_forecast_error_and_spread_match_oracles(rng):
    members = rng.standard_normal((3, 3, 4, 2))
    truth = rng.standard_normal((3, 4, 2))
    np.testing.assert_allclose(
        forecast_error(members, truth), _error_oracle(members, truth),
        rtol=0, atol=1e-12,
    )
    np.testing.assert_allclose(
        forecast_spread(members), _spread_oracle(members),
        rtol=0, atol=1e-12,
    )


def test_forecast_plug_in_values():
    members = np.array([[[[4.0]], [[6.0]]]])
    assert forecast_error(members, np.array([[[2.0]]]))[0] == 3.0
    spread_members = np.array([[[[1.0]], [[3.0]]]])
    assert forecast_spread(spread_members)[0] == 1.0


def test_perfect_forecast_and_single_member(rng):
    truth = rng.standard_normal((2, 5, 3))
    members = truth[:, None]
    np.testing.assert_array_equal(forecast_error(members, truth), 0.0)
    np.testing.assert_array_equal(forecast_spread(members), 0.0)


def test_forecast_error_requires_aligned_truth(rng):
    with pytest.raises(ValidationError):
        forecast_error(rng.standard_normal((2, 2, 4, 1)), np.zeros((2, 3, 1)))


def test_invalid_members_are_excluded():
    members = np.array([[[[1.0]], [[3.0]], [[np.nan]]]])
    valid = np.array([[True, True, False]])
    ensemble = Ensemble(members, valid, excluded=1)
    assert forecast_spread(ensemble)[0] == 1.0
    assert forecast_error(ensemble, np.array([[[2.0]]]))[0] == 0.0


def _inits(model, rng, n_inits=3, n_steps=6):
    X = rng.standard_normal((40, model.d))
    return prepare_inits(model, X, n_inits, n_steps, rng, warmup=5)


def test_prepare_inits_alignment(small_model, rng):
    X = rng.standard_normal((40, 3))
    inits = prepare_inits(
        small_model, X, 4, 6, np.random.default_rng(2), warmup=5
    )
    assert len(inits) == 4
    for init in inits:
        assert 5 <= init.index <= 40 - 6 - 1
        np.testing.assert_array_equal(init.x0, X[init.index])
        np.testing.assert_array_equal(
            init.truth, X[init.index + 1:init.index + 7]
        )
    with pytest.raises(ValidationError):
        prepare_inits(small_model, X[:10], 4, 6, np.random.default_rng(2), 5)


def test_single_noiseless_member_is_deterministic_rollout(small_model, rng):
    inits = _inits(small_model, rng)
    ensemble = forecast_ensemble(small_model, inits, 1, 6, 0, noise_on=False)
    for m, init in enumerate(inits):
        expected = rollout(
            small_model, init.x0, init.h0, RolloutConfig(6, noise_on=False)
        )
        np.testing.assert_array_equal(ensemble.members[m, 0], expected.states)


def test_forecast_ensemble_reproducible_and_distinct(small_model, rng):
    inits = _inits(small_model, rng)
    first = forecast_ensemble(small_model, inits, 4, 6, seed=9)
    second = forecast_ensemble(small_model, inits, 4, 6, seed=9)
    assert first.members.tobytes() == second.members.tobytes()
    flat = first.members.reshape(-1, 6 * 3)
    assert len({row.tobytes() for row in flat}) == len(flat), (
        'Члены ансамбля с разными (m, n) должны получать разный шум.'
    )
    assert first.excluded == 0


def test_summarize_forecast_rows(rng):
    members = rng.standard_normal((2, 3, 5, 2))
    truth = rng.standard_normal((2, 5, 2))
    summary = summarize_forecast(members, truth)
    rows = summary.rows()
    assert [row[0] for row in rows] == [1, 2, 3, 4, 5]
    lead, error, spread, ratio = rows[0]
    assert ratio == pytest.approx(spread / error)


def test_tl_benefit_indicator_examples():
    small = tl_benefit_indicator(1, 1, 10_000)
    assert small.value == pytest.approx(0.01, abs=1e-9)
    assert small.flagged
    large = tl_benefit_indicator(10_000, 8, 400)
    expected = 10 ** 0.4 * np.sqrt(8) * 1e4 / 8000
    assert large.value == pytest.approx(expected, abs=1e-9)
    assert large.value == pytest.approx(8.88, abs=0.01)
    assert not large.flagged


def test_tl_benefit_indicator_threshold():
    # 1e4 / N^1.5 = 1 при N = 10^(8/3)
    report = tl_benefit_indicator(1, 1, 100)
    assert not report.flagged
    assert tl_benefit_indicator(1, 1, 10 ** 6).flagged


def test_tl_benefit_indicator_uses_model_size(small_model):
    report = tl_benefit_indicator(small_model.n_params, 3, 400)
    assert report.n_params == sum(
        value.size for _, value in small_model.store.items()
    )


def _scores(values):
    return [
        SeedScore(seed, val, hold) for seed, (val, hold) in enumerate(values)
    ]


def test_summarize_sweep_picks_best_validation_seed():
    tl_scores = _scores([(1.0, -2.0), (5.0, -1.5), (2.0, -1.0)])
    baseline_scores = _scores([(0.0, -3.0), (0.0, -3.0)])
    tl, baseline, rows = summarize_sweep(tl_scores, baseline_scores, 'l96')
    assert tl.max_seed == 1 and tl.max_ll == -1.5, (
        'Max равен LL отложенной выборки зерна с лучшим валидационным LL.'
    )
    assert baseline.max_ll == baseline.average == -3.0
    assert baseline.half_width == 0.0
    assert rows[0] == SUMMARY_HEADER
    assert rows[1][0] == 'l96' and len(rows[1]) == len(SUMMARY_HEADER)
    seed_rows = per_seed_rows(tl, baseline)
    assert seed_rows[0] == PER_SEED_HEADER
    assert len(seed_rows) == 1 + 5


def test_moving_average():
    np.testing.assert_allclose(
        moving_average([1, 2, 3, 4, 5, 6], 5), [3.0, 4.0]
    )
