"""
Вероятностный эмулятор с общим рекуррентным стволом.

Скрытое состояние h_{t+1} = f(h_t, X_t) строится только по X. Голова X
предсказывает приращение X_{t+1} - X_t с шумом sigma, голова Y
приращение Y_{t+1} - Y_t с шумом rho. При моделировании голова Y не нужна.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .coarsegrain import Standardizer
from .constants import DROPOUT_RATE, FD_STEP
from .error_handlers import ValidationError
from .neuralnet import (
    GRU_TENSORS,
    GruParams,
    ParamStore,
    Tape,
    add_dense,
    add_gru,
    backward,
    dense_forward,
    finite_diff_check,
    gru_forward
)

TRUNK = 'gru'
HEAD_X = 'head_x'
HEAD_Y = 'head_y'
LOG_SIGMA = 'log_sigma'
LOG_RHO = 'log_rho'
GROUPS = (TRUNK, HEAD_X, HEAD_Y, LOG_SIGMA, LOG_RHO)


@dataclass
class EmulatorModel:
    store: ParamStore
    d: int
    m: int
    hidden: int
    head_x_units: int
    head_y_units: int
    dropout: float = DROPOUT_RATE
    standardizer: Optional[Standardizer] = None
    provenance: dict = field(default_factory=dict)
    config_hash: str = ''

    @property
    def dm(self) -> int:
        return self.d * self.m

    @property
    def n_params(self) -> int:
        return self.store.n_params()

    @property
    def sigma(self) -> float:
        return float(np.exp(self.store[LOG_SIGMA]))

    @property
    def rho(self) -> float:
        return float(np.exp(self.store[LOG_RHO]))

    def architecture(self) -> dict:
        return dict(
            d=self.d,
            m=self.m,
            hidden=self.hidden,
            head_x_units=self.head_x_units,
            head_y_units=self.head_y_units,
            dropout=self.dropout,
        )


@dataclass(frozen=True)
class RolloutConfig:
    n_steps: int
    noise_on: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValidationError('n_steps должно быть не меньше 1')


@dataclass
class RolloutResult:
    """Траектория в физических единицах и шаг, на котором она разошлась."""

    states: np.ndarray
    diverged_at: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.diverged_at is None


def build_model(
    d: int,
    m: int,
    hidden: int,
    head_x_units: int,
    head_y_units: int,
    rng: np.random.Generator,
    dropout: float = DROPOUT_RATE,
    standardizer: Optional[Standardizer] = None,
) -> EmulatorModel:
    """Создаёт модель; матрицы инициализируются Glorot, смещения нулями."""
    if min(d, m, hidden, head_x_units, head_y_units) < 1:
        raise ValidationError('Все размеры архитектуры должны быть >= 1')
    store = ParamStore()
    add_gru(store, TRUNK, d, hidden, rng)
    add_dense(store, f'{HEAD_X}.hidden', hidden, head_x_units, rng)
    add_dense(store, f'{HEAD_X}.out', head_x_units, d, rng)
    add_dense(store, f'{HEAD_Y}.hidden', hidden, head_y_units, rng)
    add_dense(store, f'{HEAD_Y}.out', head_y_units, d * m, rng)
    store.add(LOG_SIGMA, 0.0)
    store.add(LOG_RHO, 0.0)
    return EmulatorModel(
        store, d, m, hidden, head_x_units, head_y_units, dropout,
        standardizer,
    )


def _head(tape, model, prefix, h, train_mode, rng):
    h = tape.dropout(h, model.dropout, train_mode, rng)
    a = tape.dense(
        tape.param(f'{prefix}.hidden.W'), tape.param(f'{prefix}.hidden.b'),
        'tanh', h,
    )
    return tape.dense(
        tape.param(f'{prefix}.out.W'), tape.param(f'{prefix}.out.b'),
        'identity', a,
    )


def _as_batch(seq, width, name):
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    if seq.ndim != 3 or seq.shape[2] != width:
        raise ValidationError(
            f'{name}: ожидается форма [T x {width}], получено {seq.shape}'
        )
    return seq


def _teacher_forced(
    tape, model, X, targets, head, log_scale, train_mode, rng, h0=None
):
    B, T, _ = X.shape
    if T < 2:
        raise ValidationError('Последовательность должна содержать >= 2 шагов')
    if targets.shape[:2] != (B, T):
        raise ValidationError('Последовательности X и Y не выровнены')
    if h0 is None:
        h0 = np.zeros((B, model.hidden))
    h = tape.constant(np.broadcast_to(h0, (B, model.hidden)))
    params = {key: tape.param(f'{TRUNK}.{key}') for key in GRU_TENSORS}
    scale = tape.param(log_scale)
    increments = np.diff(targets, axis=1)
    terms = []
    for t in range(T - 1):
        h = tape.gru(params, h, tape.constant(X[:, t]))
        pred = _head(tape, model, head, h, train_mode, rng)
        terms.append(tape.gaussian_nll(pred, increments[:, t], scale))
    return tape.scaled_sum(terms, 1.0 / (B * (T - 1))), h


def lowres_objective(tape, model, X, train_mode=True, rng=None, h0=None):
    """Средний на шаг NLL для X; возвращает (узел потерь, последний h)."""
    X = _as_batch(X, model.d, 'X')
    return _teacher_forced(
        tape, model, X, X, HEAD_X, LOG_SIGMA, train_mode, rng, h0
    )


def highres_objective(tape, model, X, Y, train_mode=True, rng=None):
    X = _as_batch(X, model.d, 'X')
    Y = _as_batch(Y, model.dm, 'Y')
    return _teacher_forced(
        tape, model, X, Y, HEAD_Y, LOG_RHO, train_mode, rng
    )


def encode_sequence(model, X, h0=None) -> np.ndarray:
    """Скрытые состояния h_1..h_T, полученные прогоном GRU по X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ValidationError(
            f'X: ожидается форма [T x {model.d}], получено {X.shape}'
        )
    params = GruParams.from_store(model.store, TRUNK)
    h = np.zeros(model.hidden) if h0 is None else np.asarray(h0)
    states = np.empty((len(X), model.hidden))
    for t, x in enumerate(X):
        h = gru_forward(params, h, x)
        states[t] = h
    return states


def nll_lowres(model, X, train_mode=False, rng=None) -> float:
    """Средний на шаг NLL низкого разрешения при принудительном обучении."""
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    tape = Tape(model.store, record=False)
    loss, _ = lowres_objective(tape, model, X, train_mode, rng)
    return float(loss.value)


def nll_highres(model, X, Y, train_mode=False, rng=None) -> float:
    """Средний на шаг NLL высокого разрешения; скрытые состояния ведёт X."""
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    tape = Tape(model.store, record=False)
    loss, _ = highres_objective(tape, model, X, Y, train_mode, rng)
    return float(loss.value)


def teacher_forced_loglik(model, X, h0=None) -> tuple:
    """
    Суммарное логарифмическое правдоподобие отрезка X.

    Возвращает (сумма LL, число переходов, последнее скрытое состояние),
    чтобы длинную последовательность можно было оценивать частями,
    передавая скрытое состояние дальше.
    """
    X = _as_batch(X, model.d, 'X')
    tape = Tape(model.store, record=False)
    loss, h = lowres_objective(tape, model, X, False, None, h0)
    steps = X.shape[1] - 1
    return -float(loss.value) * steps, steps, h.value[0].copy()


def warmup_hidden(model, X_physical) -> np.ndarray:
    """Скрытое состояние после принудительного прогона отрезка X."""
    X = np.asarray(X_physical, dtype=np.float64)
    if model.standardizer is not None:
        X = model.standardizer.standardize_x(X)
    if len(X) == 0:
        return np.zeros(model.hidden)
    return encode_sequence(model, X)[-1]


def rollout_members(
    model,
    x0,
    h0,
    n_steps: int,
    rngs: Optional[Sequence[np.random.Generator]],
    n_members: int = 1,
):
    """
    Свободный прогон пакета членов ансамбля из одного начального условия.

    Каждый член получает шум из своего генератора; при `rngs=None` шум
    выключен. Возвращает (состояния [N x n_steps x d] в физических
    единицах, шаг расхождения для каждого члена или -1).
    """
    if rngs is not None:
        n_members = len(rngs)
    store = model.store
    params = GruParams.from_store(store, TRUNK)
    hx_W, hx_b = store[f'{HEAD_X}.hidden.W'], store[f'{HEAD_X}.hidden.b']
    out_W, out_b = store[f'{HEAD_X}.out.W'], store[f'{HEAD_X}.out.b']
    sigma = model.sigma
    x = np.asarray(x0, dtype=np.float64)
    if model.standardizer is not None:
        x = model.standardizer.standardize_x(x)
    x = np.tile(x, (n_members, 1))
    h = np.tile(
        np.zeros(model.hidden) if h0 is None else np.asarray(h0),
        (n_members, 1),
    )
    states = np.empty((n_members, n_steps, model.d))
    diverged = np.full(n_members, -1)
    with np.errstate(over='ignore', invalid='ignore'):
        for t in range(n_steps):
            h = gru_forward(params, h, x)
            a = dense_forward(hx_W, hx_b, 'tanh', h)
            x = x + dense_forward(out_W, out_b, 'identity', a)
            if rngs is not None:
                x = x + sigma * np.stack(
                    [rng.standard_normal(model.d) for rng in rngs]
                )
            states[:, t] = x
            bad = ~np.all(np.isfinite(x), axis=1) & (diverged < 0)
            diverged[bad] = t
    if model.standardizer is not None:
        states = model.standardizer.restore_x(states)
    return states, diverged


def rollout(model, x0, h0, cfg: RolloutConfig) -> RolloutResult:
    """
    Стохастический прогон эмулятора без данных высокого разрешения.

    x0 и результат заданы в физических единицах. При расхождении
    траектория обрезается до последнего конечного шага.
    """
    rngs = [np.random.default_rng(cfg.seed)] if cfg.noise_on else None
    states, diverged = rollout_members(model, x0, h0, cfg.n_steps, rngs)
    if diverged[0] >= 0:
        return RolloutResult(states[0, :diverged[0]], int(diverged[0]))
    return RolloutResult(states[0])


def check_gradients(model, X, Y=None, step=FD_STEP, seed=0) -> float:
    """
    Проверка градиентов модели конечными разностями на одном окне.

    Потеря равна сумме NLL X и (если задан Y) NLL Y в режиме обучения с
    фиксированными масками dropout; проверяются все параметры, включая
    замороженные. Постоянное слагаемое NLL в разностях не участвует.
    """

    def objective(record):
        tape = Tape(
            model.store, record=record, all_params=True, nll_constant=False
        )
        rng = np.random.default_rng(seed)
        loss, _ = lowres_objective(tape, model, X, True, rng)
        if Y is not None:
            loss_y, _ = highres_objective(tape, model, X, Y, True, rng)
            loss = tape.scaled_sum([loss, loss_y], 1.0)
        return tape, loss

    tape, loss = objective(True)
    grads = backward(tape, loss)
    return finite_diff_check(
        model.store, lambda: float(objective(False)[1].value), grads, step
    )
