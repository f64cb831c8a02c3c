"""Эталонные траектории высокого разрешения: KS, Брюсселятор, L96."""
from dataclasses import dataclass, field
import logging
from typing import Callable, Union

import numpy as np

from .constants import BLOWUP_THRESHOLD
from .error_handlers import IntegrationError, ValidationError

logger = logging.getLogger(__name__)

Tendency = Callable[[np.ndarray], np.ndarray]

INTEGRATORS = ('euler', 'rk4')


def _steps_per_sample(dt_solver: float, subsample_dt: float) -> int:
    """Число шагов решателя между сохраняемыми состояниями."""
    if dt_solver <= 0:
        raise ValidationError('dt_solver должен быть положительным')
    ratio = subsample_dt / dt_solver
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9 * max(1.0, ratio):
        raise ValidationError(
            f'subsample_dt={subsample_dt} не кратен dt_solver={dt_solver}'
        )
    return steps


@dataclass(frozen=True)
class KsSpec:
    nu: float = 1.0
    L: float = 22.0
    grid_points: int = 100
    dt_solver: float = 0.00005
    subsample_dt: float = 0.002
    spinup_steps: int = 10_000
    integrator: str = 'euler'

    tag = 'ks'

    def __post_init__(self):
        if self.grid_points < 4:
            raise ValidationError('grid_points должно быть не меньше 4')
        if self.L <= 0:
            raise ValidationError('L должно быть положительным')
        _validate_common(self)

    @property
    def state_size(self) -> int:
        return self.grid_points

    @property
    def layout(self) -> dict:
        return {'fields': 1, 'shape': (self.grid_points,)}


@dataclass(frozen=True)
class BrusselatorSpec:
    D0: float = 1.0
    D1: float = 0.1
    a: float = 1.0
    b: float = 3.0
    domain_size: int = 64
    dt_solver: float = 0.0002
    subsample_dt: float = 0.002
    spinup_steps: int = 10_000
    integrator: str = 'euler'

    tag = 'brusselator'

    def __post_init__(self):
        if self.D0 <= 0 or self.D1 <= 0:
            raise ValidationError('Коэффициенты диффузии должны быть > 0')
        if self.domain_size < 3:
            raise ValidationError('Сторона области должна быть не меньше 3')
        _validate_common(self)

    @property
    def state_size(self) -> int:
        return 2 * self.domain_size ** 2

    @property
    def layout(self) -> dict:
        return {'fields': 2, 'shape': (self.domain_size, self.domain_size)}


@dataclass(frozen=True)
class L96Spec:
    K: int = 8
    J: int = 32
    h: float = 1.0
    b: float = 10.0
    c: float = 10.0
    F: float = 20.0
    dt_solver: float = 0.001
    subsample_dt: float = 0.005
    spinup_steps: int = 10_000
    integrator: str = 'rk4'

    tag = 'l96'

    def __post_init__(self):
        if self.K < 4:
            raise ValidationError('K должно быть не меньше 4')
        if self.J < 3:
            raise ValidationError('J должно быть не меньше 3')
        _validate_common(self)

    @property
    def state_size(self) -> int:
        return self.K + self.K * self.J

    @property
    def layout(self) -> dict:
        return {'slow': self.K, 'fast_per_slow': self.J}


SystemSpec = Union[KsSpec, BrusselatorSpec, L96Spec]


def _validate_common(spec) -> None:
    _steps_per_sample(spec.dt_solver, spec.subsample_dt)
    if spec.spinup_steps < 0:
        raise ValidationError('spinup_steps не может быть отрицательным')
    if spec.integrator not in INTEGRATORS:
        raise ValidationError(
            f'Неизвестный интегратор {spec.integrator!r}, '
            f'допустимы: {", ".join(INTEGRATORS)}'
        )


@dataclass
class FineTrajectory:
    """Траектория высокого разрешения после отбрасывания разгона."""

    states: np.ndarray
    dt: float
    system: str
    layout: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)


def _require_finite(state: np.ndarray, size: int, name: str) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (size,):
        raise ValidationError(
            f'{name}: ожидается вектор длины {size}, получено {state.shape}'
        )
    if not np.all(np.isfinite(state)):
        raise IntegrationError(f'{name}: нефинитное состояние')
    return state


def derivative_ks(state: np.ndarray, spec: KsSpec) -> np.ndarray:
    """
    Тенденция уравнения Курамото-Сивашинского.

    Центральные разности на периодической сетке с шагом L/grid_points:
    -nu u_xxxx - u_xx - u u_x.
    """
    u = _require_finite(state, spec.grid_points, 'derivative_ks')
    dx = spec.L / spec.grid_points
    up1 = np.roll(u, -1)
    um1 = np.roll(u, 1)
    up2 = np.roll(u, -2)
    um2 = np.roll(u, 2)
    u_xx = (up1 - 2.0 * u + um1) / dx ** 2
    u_xxxx = (up2 - 4.0 * up1 + 6.0 * u - 4.0 * um1 + um2) / dx ** 4
    u_x = (up1 - um1) / (2.0 * dx)
    return -spec.nu * u_xxxx - u_xx - u * u_x


def derivative_brusselator(
    state: np.ndarray, spec: BrusselatorSpec
) -> np.ndarray:
    """Брюсселятор: периодический пятиточечный лапласиан и реакция."""
    flat = _require_finite(state, spec.state_size, 'derivative_brusselator')
    n = spec.domain_size
    u, v = flat.reshape(2, n, n)

    def laplacian(f):
        return (
            np.roll(f, 1, axis=0) + np.roll(f, -1, axis=0)
            + np.roll(f, 1, axis=1) + np.roll(f, -1, axis=1)
            - 4.0 * f
        )

    uuv = u * u * v
    du = spec.D0 * laplacian(u) + spec.a - (1.0 + spec.b) * u + uuv
    dv = spec.D1 * laplacian(v) + spec.b * u - uuv
    return np.concatenate([du.ravel(), dv.ravel()])


def derivative_l96(state: np.ndarray, spec: L96Spec) -> np.ndarray:
    """
    Тенденция двухуровневой модели Лоренца-96.

    Быстрые переменные образуют одно кольцо длины K*J, сгруппированное по
    родительской медленной переменной. Знак связи в уравнении быстрых
    переменных: -(hc/b) X_k.
    """
    flat = _require_finite(state, spec.state_size, 'derivative_l96')
    K, J = spec.K, spec.J
    x = flat[:K]
    y = flat[K:]
    coupling = spec.h * spec.c / spec.b
    dx = (
        -np.roll(x, 1) * (np.roll(x, 2) - np.roll(x, -1))
        - x
        + spec.F
        - coupling * y.reshape(K, J).sum(axis=1)
    )
    dy = (
        -spec.c * spec.b * np.roll(y, -1) * (np.roll(y, -2) - np.roll(y, 1))
        - spec.c * y
        - coupling * np.repeat(x, J)
    )
    return np.concatenate([dx, dy])


def _check_stage(value: np.ndarray, stage: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise IntegrationError(
            f'Нефинитное значение на стадии {stage}', stage=stage
        )
    return value


def step_rk4(deriv: Tendency, state: np.ndarray, dt: float) -> np.ndarray:
    """Классический шаг Рунге-Кутты четвёртого порядка."""
    if dt <= 0:
        raise ValidationError('Шаг dt должен быть положительным')
    k1 = _check_stage(deriv(state), 'k1')
    k2 = _check_stage(deriv(state + 0.5 * dt * k1), 'k2')
    k3 = _check_stage(deriv(state + 0.5 * dt * k2), 'k3')
    k4 = _check_stage(deriv(state + dt * k3), 'k4')
    return _check_stage(
        state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 'update'
    )


def step_euler(deriv: Tendency, state: np.ndarray, dt: float) -> np.ndarray:
    """Явный шаг Эйлера."""
    if dt <= 0:
        raise ValidationError('Шаг dt должен быть положительным')
    k1 = _check_stage(deriv(state), 'k1')
    return _check_stage(state + dt * k1, 'update')


_DERIVATIVES = {
    'ks': derivative_ks,
    'brusselator': derivative_brusselator,
    'l96': derivative_l96,
}
_STEPPERS = {'euler': step_euler, 'rk4': step_rk4}


def tendency_for(spec: SystemSpec) -> Tendency:
    derivative = _DERIVATIVES[spec.tag]
    return lambda state: derivative(state, spec)


def initial_state(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    """Малое возмущение опорного состояния, зависящее только от rng."""
    if spec.tag == 'ks':
        return rng.uniform(-0.5, 0.5, spec.grid_points)
    if spec.tag == 'brusselator':
        cells = spec.domain_size ** 2
        u = spec.a + rng.uniform(-0.1, 0.1, cells)
        v = spec.b / spec.a + rng.uniform(-0.1, 0.1, cells)
        return np.concatenate([u, v])
    x = spec.F + rng.uniform(-1.0, 1.0, spec.K)
    y = rng.uniform(-0.1, 0.1, spec.K * spec.J)
    return np.concatenate([x, y])


def integrate(
    spec: SystemSpec,
    state: np.ndarray,
    n_samples: int,
    skip: int = 0,
) -> np.ndarray:
    """
    Интегрирует систему из заданного состояния.

    Сохраняет каждое subsample_dt/dt_solver-е состояние, первые `skip`
    сохранённых состояний отбрасываются. Возвращает массив
    [n_samples x state_size].
    """
    deriv = tendency_for(spec)
    step = _STEPPERS[spec.integrator]
    per_sample = _steps_per_sample(spec.dt_solver, spec.subsample_dt)
    out = np.empty((n_samples, spec.state_size))
    state = np.array(state, dtype=np.float64)
    solver_step = 0
    for sample in range(skip + n_samples):
        for _ in range(per_sample):
            solver_step += 1
            try:
                state = step(deriv, state, spec.dt_solver)
            except IntegrationError as error:
                raise IntegrationError(
                    f'{error.message} (шаг решателя {solver_step})',
                    step=solver_step,
                    stage=error.stage,
                )
        if np.max(np.abs(state)) > BLOWUP_THRESHOLD:
            logger.error(
                'Взрыв решения %s на шаге %d', spec.tag, solver_step
            )
            raise IntegrationError(
                f'Решение превысило {BLOWUP_THRESHOLD:g} по модулю на шаге '
                f'решателя {solver_step}',
                step=solver_step,
            )
        if sample >= skip:
            out[sample - skip] = state
    return out


def generate_trajectory(
    spec: SystemSpec, seed: int, n_samples: int
) -> FineTrajectory:
    """
    Генерирует траекторию высокого разрешения.

    Детерминирована для фиксированных (spec, seed, n_samples): начальное
    условие берётся из генератора с зерном `seed`, первые spinup_steps
    сохранённых состояний отбрасываются.
    """
    if n_samples < 1:
        raise ValidationError('n_samples должно быть не меньше 1')
    logger.info(
        'Генерация траектории %s: %d состояний, зерно %d',
        spec.tag, n_samples, seed,
    )
    rng = np.random.default_rng(seed)
    states = integrate(
        spec, initial_state(spec, rng), n_samples, skip=spec.spinup_steps
    )
    return FineTrajectory(
        states=states,
        dt=spec.subsample_dt,
        system=spec.tag,
        layout=spec.layout,
    )
