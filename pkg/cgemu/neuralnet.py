"""
Минимальное ядро дифференцируемых вычислений.

GRU-ячейка, плотные слои, dropout и гауссово отрицательное
логарифмическое правдоподобие записываются на ленту (`Tape`); обратный
проход по ленте даёт точные градиенты, накопленные по всему развёрнутому
окну. Все вычисления ведутся в двойной точности.
"""
from dataclasses import dataclass
import hashlib
import math
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from .constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    FD_DENOMINATOR_FLOOR,
    FD_STEP,
    HALF_LOG_2PI
)
from .error_handlers import GraphError, ValidationError

ACTIVATIONS = ('identity', 'tanh')
GRU_TENSORS = ('W_z', 'U_z', 'b_z', 'W_r', 'U_r', 'b_r', 'W_c', 'U_c', 'b_c')


class ParamStore:
    """
    Именованные тензоры параметров с флагами обучаемости.

    Хранит также моменты Adam для каждого тензора и общий счётчик шагов.
    """

    def __init__(self):
        self._values: Dict[str, np.ndarray] = {}
        self._trainable: Dict[str, bool] = {}
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise ValidationError(f'Параметр {name} уже существует')
        value = np.array(value, dtype=np.float64)
        self._values[name] = value
        self._trainable[name] = trainable
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self) -> list:
        return list(self._values)

    def items(self):
        return self._values.items()

    def group(self, prefix: str) -> list:
        return [
            name for name in self._values
            if name == prefix or name.startswith(prefix + '.')
        ]

    def set_trainable(self, prefixes: Iterable[str], flag: bool) -> None:
        for prefix in prefixes:
            names = self.group(prefix)
            if not names:
                raise ValidationError(f'Нет параметров с префиксом {prefix}')
            for name in names:
                self._trainable[name] = flag

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list:
        return [name for name, flag in self._trainable.items() if flag]

    def n_params(self) -> int:
        return int(sum(value.size for value in self._values.values()))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self._values.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self._values[name][...] = value

    def reset_optimizer(self) -> None:
        for name in self._values:
            self._m[name].fill(0.0)
            self._v[name].fill(0.0)
        self.step = 0

    def checksum(self, names: Optional[Iterable[str]] = None) -> str:
        """SHA-256 от байтов выбранных тензоров (все тензоры по умолчанию)."""
        digest = hashlib.sha256()
        for name in sorted(self._values if names is None else names):
            digest.update(name.encode())
            digest.update(self._values[name].tobytes())
        return digest.hexdigest()


@dataclass
class GruParams:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_c: np.ndarray
    U_c: np.ndarray
    b_c: np.ndarray

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str = 'gru'):
        return cls(**{key: store[f'{prefix}.{key}'] for key in GRU_TENSORS})

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def inputs(self) -> int:
        return self.W_z.shape[1]


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _gru_step(p, h, x):
    if x.shape[-1] != p['W_z'].shape[1] or h.shape[-1] != p['U_z'].shape[0]:
        raise ValidationError(
            f'GRU: вход {x.shape} и состояние {h.shape} не согласованы '
            f'с весами {p["W_z"].shape}'
        )
    z = _sigmoid(x @ p['W_z'].T + h @ p['U_z'].T + p['b_z'])
    r = _sigmoid(x @ p['W_r'].T + h @ p['U_r'].T + p['b_r'])
    rh = r * h
    c = np.tanh(x @ p['W_c'].T + rh @ p['U_c'].T + p['b_c'])
    h_new = (1.0 - z) * h + z * c
    return h_new, (h, x, z, r, rh, c)


def _gru_grads(p, cache, dh_new):
    h, x, z, r, rh, c = cache
    grads = {}
    dz = dh_new * (c - h)
    dc = dh_new * z
    dh = dh_new * (1.0 - z)
    da_c = dc * (1.0 - c * c)
    grads['W_c'] = da_c.T @ x
    grads['U_c'] = da_c.T @ rh
    grads['b_c'] = da_c.sum(axis=0)
    dx = da_c @ p['W_c']
    drh = da_c @ p['U_c']
    dh += drh * r
    da_r = drh * h * r * (1.0 - r)
    grads['W_r'] = da_r.T @ x
    grads['U_r'] = da_r.T @ h
    grads['b_r'] = da_r.sum(axis=0)
    dx += da_r @ p['W_r']
    dh += da_r @ p['U_r']
    da_z = dz * z * (1.0 - z)
    grads['W_z'] = da_z.T @ x
    grads['U_z'] = da_z.T @ h
    grads['b_z'] = da_z.sum(axis=0)
    dx += da_z @ p['W_z']
    dh += da_z @ p['U_z']
    return grads, dh, dx


def gru_forward(p: GruParams, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    Один шаг GRU: h' = (1 - z) * h + z * c.

    Вентиль сброса стоит внутри произведения кандидата со скрытым
    состоянием: c = tanh(W_c x + U_c (r * h) + b_c).
    """
    h_new, _ = _gru_step(vars(p), np.asarray(h), np.asarray(x))
    return h_new


def dense_forward(W, b, activation: str, x) -> np.ndarray:
    """Плотный слой activation(W x + b)."""
    return _dense(W, b, activation, np.asarray(x))


def _dense(W, b, activation, x):
    if activation not in ACTIVATIONS:
        raise ValidationError(f'Неизвестная активация {activation!r}')
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValidationError(
            f'Плотный слой: вход {x.shape} не согласован с весами {W.shape}'
        )
    a = x @ W.T + b
    return np.tanh(a) if activation == 'tanh' else a


def dropout_forward(
    x, rate: float, train: bool, rng: Optional[np.random.Generator] = None
):
    """
    Инвертированный dropout.

    Возвращает (выход, маска); в режиме оценки и при rate = 0 маска None,
    а выход совпадает со входом.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError('Доля dropout должна быть в [0, 1)')
    x = np.asarray(x)
    if not train or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def gaussian_nll(residual, log_scale: float) -> float:
    """
    Отрицательное логарифмическое правдоподобие N(0, exp(log_scale)^2 I).

    Сумма по всем элементам невязки: 0.5 log 2pi + log_scale
    + r^2 / (2 exp(2 log_scale)).
    """
    residual = np.asarray(residual, dtype=np.float64)
    if residual.size < 1:
        raise ValidationError('Невязка должна содержать хотя бы один элемент')
    if not np.all(np.isfinite(residual)):
        raise ValidationError('Невязка содержит нефинитные значения')
    return _nll_value(residual, log_scale)


def _nll_value(residual, log_scale, constant=True):
    inv_var = np.exp(-2.0 * log_scale)
    offset = HALF_LOG_2PI if constant else 0.0
    return math.fsum((
        residual.size * (offset + log_scale),
        0.5 * inv_var * math.fsum(np.ravel(residual * residual)),
    ))


class Node:
    """Значение на ленте и накопленный градиент по нему."""

    __slots__ = ('value', 'grad', 'requires_grad', 'backward', 'name')

    def __init__(self, value, requires_grad=False, backward=None, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.backward = backward
        self.name = name

    def accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad


class Tape:
    """
    Лента прямого прохода.

    С `record=False` лента только вычисляет значения (режим оценки). С
    `all_params=True` градиенты считаются и для замороженных параметров
    (нужно для проверки конечными разностями). С `nll_constant=False` из
    NLL исключается слагаемое 0.5 log 2pi на элемент; градиенты от этого
    не меняются.
    """

    def __init__(
        self,
        store: ParamStore,
        record: bool = True,
        all_params: bool = False,
        nll_constant: bool = True,
    ):
        self.store = store
        self.record = record
        self.all_params = all_params
        self.nll_constant = nll_constant
        self._nodes = []
        self._params: Dict[str, Node] = {}

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def param(self, name: str) -> Node:
        node = self._params.get(name)
        if node is None:
            wants = self.record and (
                self.all_params or self.store.is_trainable(name)
            )
            node = Node(self.store[name], requires_grad=wants, name=name)
            self._params[name] = node
        return node

    def _push(self, value, parents, backward) -> Node:
        wants = self.record and any(p.requires_grad for p in parents)
        node = Node(value, requires_grad=wants)
        if wants:
            node.backward = backward
            self._nodes.append(node)
        return node

    def gru(self, params: Dict[str, Node], h: Node, x: Node) -> Node:
        p = {key: node.value for key, node in params.items()}
        h_new, cache = _gru_step(p, h.value, x.value)

        def backward(node):
            grads, dh, dx = _gru_grads(p, cache, node.grad)
            for key, param in params.items():
                if param.requires_grad:
                    param.accumulate(grads[key])
            if h.requires_grad:
                h.accumulate(dh)
            if x.requires_grad:
                x.accumulate(dx)

        return self._push(h_new, [h, x, *params.values()], backward)

    def dense(self, W: Node, b: Node, activation: str, x: Node) -> Node:
        y = _dense(W.value, b.value, activation, x.value)

        def backward(node):
            da = node.grad
            if activation == 'tanh':
                da = da * (1.0 - y * y)
            if W.requires_grad:
                W.accumulate(da.T @ x.value)
            if b.requires_grad:
                b.accumulate(da.sum(axis=0))
            if x.requires_grad:
                x.accumulate(da @ W.value)

        return self._push(y, [W, b, x], backward)

    def dropout(
        self, x: Node, rate: float, train: bool, rng=None
    ) -> Node:
        y, mask = dropout_forward(x.value, rate, train, rng)
        if mask is None:
            return x

        def backward(node):
            x.accumulate(node.grad * mask)

        return self._push(y, [x], backward)

    def gaussian_nll(self, pred: Node, target, log_scale: Node) -> Node:
        """Сумма NLL по пакету и измерениям для невязки target - pred."""
        residual = np.asarray(target) - pred.value
        value = _nll_value(
            residual, float(log_scale.value), self.nll_constant
        )

        def backward(node):
            g = float(node.grad)
            inv_var = np.exp(-2.0 * log_scale.value)
            if pred.requires_grad:
                pred.accumulate(-g * inv_var * residual)
            if log_scale.requires_grad:
                log_scale.accumulate(
                    g * (residual.size - inv_var * np.sum(residual ** 2))
                )

        return self._push(np.float64(value), [pred, log_scale], backward)

    def scaled_sum(self, terms, factor: float) -> Node:
        value = np.float64(factor * math.fsum(float(t.value) for t in terms))

        def backward(node):
            for term in terms:
                if term.requires_grad:
                    term.accumulate(factor * node.grad)

        return self._push(value, list(terms), backward)


def backward(tape: Tape, loss: Node) -> Dict[str, np.ndarray]:
    """
    Обратный проход по ленте.

    Возвращает градиенты скалярной потери по всем параметрам, на которые
    она зависит и которые требуют градиента.
    """
    if not tape.record or not tape._nodes or loss is not tape._nodes[-1]:
        raise GraphError(
            'Обратный проход требует записанного прямого прохода, '
            'завершающегося функцией потерь'
        )
    for node in tape._params.values():
        node.grad = None
    loss.grad = np.float64(1.0)
    for node in reversed(tape._nodes):
        if node.grad is not None:
            node.backward(node)
    tape._nodes = []
    return {
        name: node.grad if node.grad is not None
        else np.zeros_like(node.value)
        for name, node in tape._params.items()
        if node.requires_grad
    }


def adam_update(
    store: ParamStore,
    grads: Dict[str, np.ndarray],
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """Шаг Adam с коррекцией смещения; замороженные тензоры не меняются."""
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name in sorted(grads):
        if not store.is_trainable(name):
            continue
        g = grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        store[name][...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


def add_gru(store: ParamStore, prefix: str, d: int, H: int, rng) -> None:
    for gate in ('z', 'r', 'c'):
        store.add(f'{prefix}.W_{gate}', glorot_uniform(rng, H, d))
        store.add(f'{prefix}.U_{gate}', glorot_uniform(rng, H, H))
        store.add(f'{prefix}.b_{gate}', np.zeros(H))


def add_dense(store: ParamStore, prefix: str, n_in: int, n_out: int, rng):
    store.add(f'{prefix}.W', glorot_uniform(rng, n_out, n_in))
    store.add(f'{prefix}.b', np.zeros(n_out))


def finite_diff_check(
    store: ParamStore,
    loss_fn: Callable[[], float],
    grads: Dict[str, np.ndarray],
    step: float = FD_STEP,
    names: Optional[Iterable[str]] = None,
) -> float:
    """
    Сравнивает градиенты с центральными конечными разностями.

    `loss_fn` должна быть детерминированной (маски dropout фиксированы).
    Возвращает наибольшую относительную ошибку
    |g_fd - g| / max(|g_fd|, |g|, 1e-3) по всем проверенным элементам.
    """
    worst = 0.0
    for name in names or sorted(grads):
        value = store[name]
        grad = grads.get(name, np.zeros_like(value))
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + step
            plus = loss_fn()
            value[index] = original - step
            minus = loss_fn()
            value[index] = original
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(grad[index])
            denominator = max(
                abs(numeric), abs(analytic), FD_DENOMINATOR_FLOOR
            )
            worst = max(worst, abs(numeric - analytic) / denominator)
    return worst
