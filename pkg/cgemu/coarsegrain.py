"""Парные наборы данных низкого и высокого разрешения."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .constants import CONSTANT_SCALE_RTOL, SYSTEMS
from .dynsys import FineTrajectory
from .error_handlers import DatasetError, ValidationError


@dataclass(frozen=True)
class CoarsenSpec:
    system: str
    temporal_factor: int = 1
    spatial_factor: int = 1

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValidationError(f'Неизвестная система {self.system!r}')
        if self.temporal_factor < 1 or self.spatial_factor < 1:
            raise ValidationError('Коэффициенты огрубления должны быть >= 1')


@dataclass(frozen=True)
class SplitPlan:
    train_len: int
    val_len: int
    holdout_len: int
    buffer_len: int = 0

    def __post_init__(self):
        if min(self.train_len, self.val_len, self.holdout_len) < 1:
            raise ValidationError('Длины разбиений должны быть >= 1')
        if self.buffer_len < 0:
            raise ValidationError('buffer_len не может быть отрицательным')

    @property
    def total_len(self) -> int:
        return (
            self.train_len + self.val_len + self.holdout_len
            + 2 * self.buffer_len
        )


@dataclass
class Standardizer:
    """Поразмерные среднее и масштаб для X и Y."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    def standardize_x(self, X):
        return (X - self.x_mean) / self.x_scale

    def restore_x(self, Z):
        return Z * self.x_scale + self.x_mean

    def standardize_y(self, Y):
        return (Y - self.y_mean) / self.y_scale

    def restore_y(self, Z):
        return Z * self.y_scale + self.y_mean


class PairedDataset:
    """
    Выровненные последовательности X (низкое разрешение) и Y (высокое).

    Чтения `Y` подсчитываются в `y_reads`: так проверяется, что обучение
    без переноса никогда не обращается к данным высокого разрешения.
    """

    def __init__(
        self,
        X: np.ndarray,
        Y: Optional[np.ndarray],
        dt_coarse: float,
        system: str,
        m: int,
        standardizer: Optional[Standardizer] = None,
    ):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DatasetError('X должен иметь форму [T x d]')
        if Y is not None:
            Y = np.asarray(Y, dtype=np.float64)
            if Y.ndim != 2 or len(Y) != len(X):
                raise DatasetError('X и Y должны иметь одинаковую длину')
            if Y.shape[1] != X.shape[1] * m:
                raise DatasetError(
                    f'Ширина Y {Y.shape[1]} не равна d*m = '
                    f'{X.shape[1]}*{m}'
                )
        self.X = X
        self._Y = Y
        self.dt_coarse = dt_coarse
        self.system = system
        self.m = m
        self.standardizer = standardizer
        self.y_reads = 0

    @property
    def Y(self) -> np.ndarray:
        self.y_reads += 1
        if self._Y is None:
            raise DatasetError('Блок Y не загружен')
        return self._Y

    @property
    def has_y(self) -> bool:
        return self._Y is not None

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return len(self.X)

    def segment(self, start: int, stop: int) -> 'PairedDataset':
        """Непрерывный отрезок [start, stop) без чтения Y через свойство."""
        return PairedDataset(
            self.X[start:stop].copy(),
            None if self._Y is None else self._Y[start:stop].copy(),
            self.dt_coarse,
            self.system,
            self.m,
            self.standardizer,
        )


def spatial_block_mean(field: np.ndarray, factor: int) -> np.ndarray:
    """
    Среднее по непересекающимся пространственным блокам.

    Одномерное поле усредняется по блокам из factor ячеек, двумерное по
    блокам factor x factor. Для массивов с ведущими осями (время, номер
    поля) используется `spatial_block_mean_nd`.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 1:
        return spatial_block_mean_nd(field, factor, 1)
    if field.ndim == 2:
        return spatial_block_mean_nd(field, factor, 2)
    raise ValidationError('Поле должно быть одномерным или двумерным')


def spatial_block_mean_nd(
    field: np.ndarray, factor: int, spatial_dims: int
) -> np.ndarray:
    if factor < 1:
        raise ValidationError('factor должен быть >= 1')
    extents = field.shape[-spatial_dims:]
    if any(n % factor for n in extents):
        raise DatasetError(
            f'Размеры {extents} не делятся на коэффициент {factor}'
        )
    lead = field.shape[:-spatial_dims]
    if spatial_dims == 1:
        n = extents[0]
        return field.reshape(*lead, n // factor, factor).mean(axis=-1)
    rows, cols = extents
    blocks = field.reshape(
        *lead, rows // factor, factor, cols // factor, factor
    )
    return blocks.mean(axis=(-3, -1))


def temporal_block_mean(seq: np.ndarray, factor: int) -> np.ndarray:
    """Средние по непересекающимся окнам [w*factor, (w+1)*factor)."""
    seq = np.asarray(seq, dtype=np.float64)
    if factor < 1:
        raise ValidationError('factor должен быть >= 1')
    T = seq.shape[0]
    if T % factor:
        raise DatasetError(f'Длина {T} не делится на коэффициент {factor}')
    if factor == 1:
        return seq.copy()
    return seq.reshape(T // factor, factor, *seq.shape[1:]).mean(axis=1)


def fine_dims(fine: FineTrajectory, spec: CoarsenSpec) -> tuple:
    """Размерности (d, m) парного набора для заданной траектории."""
    layout = fine.layout
    if spec.system == 'l96':
        return layout['slow'], layout['fast_per_slow']
    block = spec.spatial_factor ** len(layout['shape'])
    cells = int(np.prod(layout['shape']))
    return layout['fields'] * cells // block, block


def build_paired_dataset(
    fine: FineTrajectory, spec: CoarsenSpec
) -> PairedDataset:
    """
    Строит выровненную пару (X_t, Y_t) на общей грубой сетке времени.

    Y_t: среднее по временному окну в полном пространственном разрешении,
    X_t: пространственное блочное среднее Y_t. Для L96 X_t содержит медленные,
    а Y_t быстрые переменные без усреднения.
    """
    if fine.system != spec.system:
        raise DatasetError(
            f'Траектория {fine.system!r} не соответствует спецификации '
            f'огрубления {spec.system!r}'
        )
    states = np.asarray(fine.states, dtype=np.float64)
    dt_coarse = fine.dt * spec.temporal_factor
    if spec.system == 'l96':
        K, J = fine.layout['slow'], fine.layout['fast_per_slow']
        if states.shape[1] != K + K * J:
            raise DatasetError('Раскладка состояния L96 не совпадает')
        coarse = temporal_block_mean(states, spec.temporal_factor)
        return PairedDataset(
            coarse[:, :K], coarse[:, K:], dt_coarse, spec.system, J
        )
    shape = tuple(fine.layout['shape'])
    n_fields = fine.layout['fields']
    if states.shape[1] != n_fields * int(np.prod(shape)):
        raise DatasetError(
            f'Длина состояния {states.shape[1]} не совпадает с раскладкой'
        )
    Y = temporal_block_mean(states, spec.temporal_factor)
    fields = Y.reshape(len(Y), n_fields, *shape)
    X = spatial_block_mean_nd(fields, spec.spatial_factor, len(shape))
    d, m = fine_dims(fine, spec)
    return PairedDataset(
        X.reshape(len(Y), d), Y, dt_coarse, spec.system, m
    )


def split_with_buffer(ds: PairedDataset, plan: SplitPlan) -> tuple:
    """Разбиение train, buffer, val, buffer, holdout; хвост отбрасывается."""
    if plan.total_len > len(ds):
        raise DatasetError(
            f'План разбиения требует {plan.total_len} точек, '
            f'в наборе {len(ds)}'
        )
    start = 0
    parts = []
    for length in (plan.train_len, plan.val_len, plan.holdout_len):
        parts.append(ds.segment(start, start + length))
        start += length + plan.buffer_len
    return tuple(parts)


def fit_standardizer(train: PairedDataset) -> Standardizer:
    """Статистики стандартизации по обучающему разбиению."""

    def stats(data):
        mean = data.mean(axis=0)
        scale = data.std(axis=0)
        scale[scale <= CONSTANT_SCALE_RTOL * np.abs(mean)] = 1.0
        return mean, scale

    x_mean, x_scale = stats(train.X)
    if train.has_y:
        y_mean, y_scale = stats(train.Y)
    else:
        width = train.d * train.m
        y_mean, y_scale = np.zeros(width), np.ones(width)
    return Standardizer(x_mean, x_scale, y_mean, y_scale)


def apply_standardizer(
    ds: PairedDataset, standardizer: Standardizer
) -> PairedDataset:
    return PairedDataset(
        standardizer.standardize_x(ds.X),
        standardizer.standardize_y(ds.Y) if ds.has_y else None,
        ds.dt_coarse,
        ds.system,
        ds.m,
        standardizer,
    )


def invert_standardizer(
    ds: PairedDataset, standardizer: Standardizer
) -> PairedDataset:
    return PairedDataset(
        standardizer.restore_x(ds.X),
        standardizer.restore_y(ds.Y) if ds.has_y else None,
        ds.dt_coarse,
        ds.system,
        ds.m,
        standardizer,
    )


def with_standardizer(
    ds: PairedDataset, standardizer: Standardizer
) -> PairedDataset:
    """Тот же набор с прикреплённым стандартизатором."""
    result = ds.segment(0, len(ds))
    result.standardizer = standardizer
    return result
