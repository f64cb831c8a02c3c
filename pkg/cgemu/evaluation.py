"""Правдоподобие на отложенной выборке, ансамблевые прогнозы и индикатор."""
from dataclasses import dataclass, field
import logging
from typing import List, Optional, Sequence

import numpy as np

from .constants import CI_Z, INDICATOR_THRESHOLD, WARMUP_STEPS
from .error_handlers import ValidationError
from .seqmodel import nll_lowres, rollout_members, warmup_hidden

logger = logging.getLogger(__name__)

SUMMARY_HEADER = (
    'system', 'tl_max', 'tl_average', 'tl_half_width',
    'baseline_max', 'baseline_average', 'baseline_half_width',
)
PER_SEED_HEADER = ('mode', 'seed', 'val_ll', 'holdout_ll')
FORECAST_HEADER = ('lead', 'error', 'spread', 'ratio')
INDICATOR_HEADER = ('system', 'n_params', 'd', 'train_len', 'value', 'flag')


@dataclass
class SeedScore:
    seed: int
    val_ll: float
    holdout_ll: float


@dataclass
class SweepSummary:
    mode: str
    scores: List[SeedScore]
    max_seed: int
    max_ll: float
    average: float
    half_width: float


@dataclass
class ForecastInit:
    """Начальное условие прогноза: x0, прогретое h0 и истинное продолжение."""

    index: int
    x0: np.ndarray
    h0: np.ndarray
    truth: np.ndarray


@dataclass
class Ensemble:
    """Сырые ансамбли [M x N x шаги x d] и маска конечных членов."""

    members: np.ndarray
    valid: np.ndarray
    excluded: int = 0


@dataclass
class ForecastSummary:
    leads: np.ndarray
    error: np.ndarray
    spread: np.ndarray
    meta: dict = field(default_factory=dict)

    def rows(self) -> list:
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = np.where(self.error > 0, self.spread / self.error, np.nan)
        return [
            (int(lead), float(e), float(s), float(r))
            for lead, e, s, r in zip(
                self.leads, self.error, self.spread, ratio
            )
        ]


@dataclass
class IndicatorReport:
    n_params: int
    d: int
    train_len: int
    value: float

    @property
    def flagged(self) -> bool:
        """Перенос, вероятно, мало полезен."""
        return self.value <= INDICATOR_THRESHOLD


def holdout_loglik(model, X) -> float:
    """
    Средний на шаг LL отложенной выборки.

    Принудительное обучение, скрытое состояние с нуля, один проход по всей
    последовательности в стандартизованном пространстве.
    """
    return -nll_lowres(model, X, train_mode=False)


def confidence_interval_95(values: Sequence[float]) -> tuple:
    """Среднее и полуширина 1.96 s / sqrt(n) (нормальное приближение)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValidationError('Для интервала нужно не меньше двух значений')
    return (
        float(values.mean()),
        float(CI_Z * values.std(ddof=1) / np.sqrt(values.size)),
    )


def prepare_inits(
    model,
    X_physical: np.ndarray,
    n_inits: int,
    n_steps: int,
    rng: np.random.Generator,
    warmup: int = WARMUP_STEPS,
) -> List[ForecastInit]:
    """
    Случайные начальные условия из данных, не участвовавших в обучении.

    Для каждого условия скрытое состояние прогревается принудительным
    прогоном `warmup` предшествующих шагов; истиной служат следующие n_steps
    состояний.
    """
    X = np.asarray(X_physical, dtype=np.float64)
    low, high = warmup, len(X) - n_steps - 1
    if high < low:
        raise ValidationError(
            f'Последовательность длины {len(X)} слишком коротка для '
            f'прогрева {warmup} и прогноза {n_steps} шагов'
        )
    starts = np.sort(rng.choice(
        np.arange(low, high + 1), size=n_inits,
        replace=n_inits > high - low + 1,
    ))
    return [
        ForecastInit(
            index=int(start),
            x0=X[start].copy(),
            h0=warmup_hidden(model, X[start - warmup:start]),
            truth=X[start + 1:start + 1 + n_steps].copy(),
        )
        for start in starts
    ]


def forecast_ensemble(
    model,
    inits: Sequence[ForecastInit],
    n_members: int,
    n_steps: int,
    seed: int,
    noise_on: bool = True,
) -> Ensemble:
    """
    M x N стохастических прогонов; шум члена (m, n) из потока (seed, m, n).

    Члены с нефинитными значениями исключаются, их число сообщается.
    """
    if n_members < 1:
        raise ValidationError('Размер ансамбля должен быть >= 1')
    members = np.empty((len(inits), n_members, n_steps, model.d))
    valid = np.ones((len(inits), n_members), dtype=bool)
    for m, init in enumerate(inits):
        rngs = [
            np.random.default_rng([seed, m, n]) for n in range(n_members)
        ] if noise_on else None
        states, diverged = rollout_members(
            model, init.x0, init.h0, n_steps, rngs, n_members
        )
        members[m] = states
        valid[m] = diverged < 0
    excluded = int((~valid).sum())
    if excluded:
        logger.warning('Исключено нефинитных членов ансамбля: %d', excluded)
    return Ensemble(members, valid, excluded)


def _as_ensemble(ensembles):
    if isinstance(ensembles, Ensemble):
        return ensembles.members, ensembles.valid
    members = np.asarray(ensembles, dtype=np.float64)
    if members.ndim != 4:
        raise ValidationError('Ансамбли должны иметь форму [M x N x T x d]')
    return members, np.ones(members.shape[:2], dtype=bool)


def _ensemble_mean(members, valid):
    weights = valid[:, :, None, None].astype(np.float64)
    safe = np.where(weights > 0, members, 0.0)
    counts = weights.sum(axis=1)
    if np.any(counts == 0):
        raise ValidationError('У начального условия не осталось членов')
    return safe.sum(axis=1) / counts, safe, weights


def forecast_error(ensembles, truth) -> np.ndarray:
    """RMS расстояние среднего ансамбля до истины по условиям и измерениям."""
    members, valid = _as_ensemble(ensembles)
    truth = np.asarray(truth, dtype=np.float64)
    mean, _, _ = _ensemble_mean(members, valid)
    if truth.shape != mean.shape:
        raise ValidationError(
            f'Истина {truth.shape} не выровнена с прогнозом {mean.shape}'
        )
    M, T, d = mean.shape
    return np.sqrt(((truth - mean) ** 2).sum(axis=(0, 2)) / (M * d))


def forecast_spread(ensembles) -> np.ndarray:
    """RMS отклонение членов от среднего ансамбля."""
    members, valid = _as_ensemble(ensembles)
    mean, safe, weights = _ensemble_mean(members, valid)
    d = members.shape[3]
    squares = weights * (safe - mean[:, None]) ** 2
    return np.sqrt(squares.sum(axis=(0, 1, 3)) / (weights.sum() * d))


def summarize_forecast(ensembles, truth, meta=None) -> ForecastSummary:
    error = forecast_error(ensembles, truth)
    return ForecastSummary(
        leads=np.arange(1, len(error) + 1),
        error=error,
        spread=forecast_spread(ensembles),
        meta=meta or {},
    )


def tl_benefit_indicator(
    n_params: int, d: int, train_len: int
) -> IndicatorReport:
    """N_p^0.1 * d^0.5 * 1e4 / N^1.5; <= 1: перенос мало полезен."""
    if min(n_params, d, train_len) < 1:
        raise ValidationError('Аргументы индикатора должны быть >= 1')
    value = n_params ** 0.1 * d ** 0.5 * 1e4 / train_len ** 1.5
    return IndicatorReport(n_params, d, train_len, float(value))


def summarize_mode(mode: str, scores: Sequence[SeedScore]) -> SweepSummary:
    if len(scores) < 2:
        raise ValidationError(
            f'Для сводки режима {mode} нужно не меньше двух зёрен'
        )
    best = max(scores, key=lambda score: score.val_ll)
    average, half_width = confidence_interval_95(
        [score.holdout_ll for score in scores]
    )
    return SweepSummary(
        mode, list(scores), best.seed, best.holdout_ll, average, half_width
    )


def summarize_sweep(
    tl_scores: Sequence[SeedScore],
    baseline_scores: Sequence[SeedScore],
    system: str = '',
) -> tuple:
    """
    Сводка в форме таблицы: Max и Average +- 95% для обоих режимов.

    Max: LL на отложенной выборке зерна с наибольшим валидационным LL
    (при равенстве берётся первое по порядку).
    """
    tl = summarize_mode('tl', tl_scores)
    baseline = summarize_mode('baseline', baseline_scores)
    row = (
        system,
        tl.max_ll, tl.average, tl.half_width,
        baseline.max_ll, baseline.average, baseline.half_width,
    )
    return tl, baseline, [SUMMARY_HEADER, row]


def per_seed_rows(*summaries: SweepSummary) -> list:
    rows = [PER_SEED_HEADER]
    for summary in summaries:
        rows.extend(
            (summary.mode, s.seed, s.val_ll, s.holdout_ll)
            for s in summary.scores
        )
    return rows


def moving_average(values, window: int = 5) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode='valid')


def best_member(scores: Sequence[SeedScore]) -> Optional[SeedScore]:
    return max(scores, key=lambda score: score.val_ll) if scores else None
