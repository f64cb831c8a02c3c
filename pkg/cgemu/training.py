"""
Двухэтапное обучение с переносом, обучение без переноса и серии зёрен.

Этап 1 обучает общий ствол и голову Y на данных высокого разрешения,
этап 2 дообучает только голову X и sigma при замороженном стволе.
"""
import asyncio
from dataclasses import dataclass, field
import logging
import time
from typing import List, Optional, Sequence

import numpy as np

from .coarsegrain import PairedDataset
from .constants import (
    BATCH_SIZE,
    MODES,
    N_SEEDS,
    PATIENCE,
    PHASE1_EPOCHS,
    TBPTT_LEN
)
from .error_handlers import TrainingDivergedError, ValidationError
from .neuralnet import Tape, adam_update, backward
from .seqmodel import (
    GROUPS,
    HEAD_X,
    HEAD_Y,
    LOG_RHO,
    LOG_SIGMA,
    TRUNK,
    EmulatorModel,
    build_model,
    highres_objective,
    lowres_objective,
    nll_highres,
    nll_lowres
)

logger = logging.getLogger(__name__)

# Независимые потоки случайных чисел одного экземпляра.
STREAMS = {
    'init': 0,
    'highres_windows': 1,
    'highres_dropout': 2,
    'lowres_windows': 3,
    'lowres_dropout': 4,
}


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[purpose]])


@dataclass(frozen=True)
class TrainPlan:
    phase1_epochs: int = PHASE1_EPOCHS
    phase2_epochs: int = 250
    tbptt_len: int = TBPTT_LEN
    batch_size: int = BATCH_SIZE
    lr: float = 0.001
    patience: int = PATIENCE
    n_seeds: int = N_SEEDS
    mode: str = 'tl'
    early_stopping: bool = True

    def __post_init__(self):
        counts = (
            self.phase1_epochs, self.phase2_epochs, self.tbptt_len,
            self.batch_size, self.patience, self.n_seeds,
        )
        if min(counts) < 1:
            raise ValidationError('Счётчики плана обучения должны быть >= 1')
        if self.lr <= 0:
            raise ValidationError('Скорость обучения должна быть > 0')
        if self.mode not in MODES:
            raise ValidationError(
                f'Режим {self.mode!r} не поддерживается: {", ".join(MODES)}'
            )


@dataclass(frozen=True)
class ArchSpec:
    hidden: int
    head_x_units: int
    head_y_units: int
    dropout: float = 0.3

    def __post_init__(self):
        if min(self.hidden, self.head_x_units, self.head_y_units) < 1:
            raise ValidationError('Ширины слоёв должны быть >= 1')
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError('Доля dropout должна быть в [0, 1)')


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_nll: float
    val_ll: float


@dataclass
class TrainLog:
    seed: int
    mode: str
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_ll: Optional[float] = None
    wall_clock: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def val_lls(self, phase: str) -> list:
        return [r.val_ll for r in self.records if r.phase == phase]

    def rows(self) -> list:
        return [
            (r.epoch, r.phase, r.train_nll, r.val_ll) for r in self.records
        ]


class EarlyStopping:
    """Отслеживает лучшую эпоху по валидационному LL."""

    def __init__(self, patience: Optional[int]):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Регистрирует эпоху; True, если она стала лучшей."""
        self.epoch += 1
        if value > self.best:
            self.best = value
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return (
            self.patience is not None
            and self.best_epoch is not None
            and self.epoch - self.best_epoch >= self.patience
        )


def early_stop_select(val_lls: Sequence[float], patience: int) -> int:
    """Номер лучшей эпохи (с единицы) с учётом остановки по терпению."""
    if not len(val_lls):
        raise ValidationError('Нужна хотя бы одна эпоха')
    stopper = EarlyStopping(patience)
    for value in val_lls:
        stopper.update(value)
        if stopper.should_stop:
            break
    return stopper.best_epoch


def make_windows(
    split, tbptt_len: int, batch_size: int, rng: np.random.Generator
) -> list:
    """
    Эпоха окон для усечённого обратного распространения.

    Окна начинаются в 0, tbptt_len, 2*tbptt_len, ... и содержат
    tbptt_len + 1 состояний; порядок перемешивается, окна группируются в
    пакеты размера не больше batch_size.
    """
    length = len(split)
    if length < tbptt_len + 1:
        raise ValidationError(
            f'Длина разбиения {length} меньше окна {tbptt_len} + 1'
        )
    offsets = np.arange(0, length - tbptt_len, tbptt_len)
    offsets = offsets[rng.permutation(len(offsets))]
    return [
        offsets[i:i + batch_size] for i in range(0, len(offsets), batch_size)
    ]


def gather_windows(seq: np.ndarray, offsets, tbptt_len: int) -> np.ndarray:
    return seq[np.asarray(offsets)[:, None] + np.arange(tbptt_len + 1)]


def _run_epoch(model, plan, length, objective, windows_rng, dropout_rng):
    losses = []
    for offsets in make_windows(
        range(length), plan.tbptt_len, plan.batch_size, windows_rng
    ):
        tape = Tape(model.store)
        loss = objective(tape, offsets, dropout_rng)
        value = float(loss.value)
        if not np.isfinite(value):
            return value
        adam_update(model.store, backward(tape, loss), plan.lr)
        losses.append(value)
    return float(np.mean(losses))


def _diverged(log, epoch, phase):
    message = (
        f'Потери стали нефинитными: зерно {log.seed}, этап {phase}, '
        f'эпоха {epoch}'
    )
    logger.warning(message)
    return TrainingDivergedError(message, seed=log.seed, epoch=epoch)


def train_phase1_highres(
    model: EmulatorModel,
    train: PairedDataset,
    val: PairedDataset,
    plan: TrainPlan,
    log: TrainLog,
) -> TrainLog:
    """Этап 1: Adam по NLL высокого разрешения фиксированное число эпох."""
    X, Y = train.X, train.Y
    val_X, val_Y = val.X, val.Y
    windows_rng = stream(log.seed, 'highres_windows')
    dropout_rng = stream(log.seed, 'highres_dropout')

    def objective(tape, offsets, rng):
        loss, _ = highres_objective(
            tape, model,
            gather_windows(X, offsets, plan.tbptt_len),
            gather_windows(Y, offsets, plan.tbptt_len),
            True, rng,
        )
        return loss

    for epoch in range(1, plan.phase1_epochs + 1):
        train_nll = _run_epoch(
            model, plan, len(X), objective, windows_rng, dropout_rng
        )
        val_ll = -nll_highres(model, val_X, val_Y) if np.isfinite(
            train_nll
        ) else np.nan
        if not np.isfinite(val_ll):
            raise _diverged(log, epoch, 'highres')
        log.records.append(EpochRecord(epoch, 'highres', train_nll, val_ll))
        logger.debug(
            'Зерно %d, этап 1, эпоха %d: NLL %.6f, вал. LL %.6f',
            log.seed, epoch, train_nll, val_ll,
        )
    return log


def _fit_lowres(model, train, val, plan, log, phase):
    X = train.X
    val_X = val.X
    windows_rng = stream(log.seed, 'lowres_windows')
    dropout_rng = stream(log.seed, 'lowres_dropout')
    model.store.reset_optimizer()
    stopper = EarlyStopping(plan.patience if plan.early_stopping else None)
    best = None

    def objective(tape, offsets, rng):
        loss, _ = lowres_objective(
            tape, model, gather_windows(X, offsets, plan.tbptt_len), True, rng
        )
        return loss

    for epoch in range(1, plan.phase2_epochs + 1):
        train_nll = _run_epoch(
            model, plan, len(X), objective, windows_rng, dropout_rng
        )
        val_ll = -nll_lowres(model, val_X) if np.isfinite(
            train_nll
        ) else np.nan
        if not np.isfinite(val_ll):
            raise _diverged(log, epoch, phase)
        log.records.append(EpochRecord(epoch, phase, train_nll, val_ll))
        logger.debug(
            'Зерно %d, %s, эпоха %d: NLL %.6f, вал. LL %.6f',
            log.seed, phase, epoch, train_nll, val_ll,
        )
        if stopper.update(val_ll):
            best = model.store.snapshot()
        if stopper.should_stop:
            logger.info(
                'Зерно %d: ранняя остановка после эпохи %d, лучшая %d',
                log.seed, epoch, stopper.best_epoch,
            )
            break
    if plan.early_stopping:
        model.store.restore(best)
        log.best_epoch = stopper.best_epoch
        log.best_val_ll = float(stopper.best)
    else:
        log.best_epoch = stopper.epoch
        log.best_val_ll = float(log.val_lls(phase)[-1])
    return log


def freeze_shared(model: EmulatorModel) -> EmulatorModel:
    """Замораживает ствол и голову Y; обучаемы только голова X и sigma."""
    model.store.set_trainable([TRUNK, HEAD_Y, LOG_RHO], False)
    model.store.set_trainable([HEAD_X, LOG_SIGMA], True)
    return model


def unfreeze_all(model: EmulatorModel) -> EmulatorModel:
    model.store.set_trainable(GROUPS, True)
    return model


def train_phase2_lowres(
    model: EmulatorModel,
    train: PairedDataset,
    val: PairedDataset,
    plan: TrainPlan,
    log: TrainLog,
) -> TrainLog:
    """Этап 2: дообучение головы X с ранней остановкой по LL X."""
    if any(model.store.is_trainable(n) for n in model.store.group(TRUNK)):
        raise ValidationError(
            'Перед этапом 2 общий ствол должен быть заморожен'
        )
    return _fit_lowres(model, train, val, plan, log, 'lowres')


def train_baseline(
    model: EmulatorModel,
    train: PairedDataset,
    val: PairedDataset,
    plan: TrainPlan,
    log: TrainLog,
) -> TrainLog:
    """Обучение без переноса: только X, ствол и голова X обучаемы."""
    model.store.set_trainable([TRUNK, HEAD_X, LOG_SIGMA], True)
    model.store.set_trainable([HEAD_Y, LOG_RHO], False)
    return _fit_lowres(model, train, val, plan, log, 'lowres')


def train_transfer(model, train, val, plan, log) -> TrainLog:
    unfreeze_all(model)
    train_phase1_highres(model, train, val, plan, log)
    freeze_shared(model)
    return train_phase2_lowres(model, train, val, plan, log)


def init_model(
    arch: ArchSpec, d: int, m: int, seed: int, standardizer=None
) -> EmulatorModel:
    """Модель экземпляра серии; инициализация зависит только от seed."""
    return build_model(
        d, m, arch.hidden, arch.head_x_units, arch.head_y_units,
        stream(seed, 'init'), arch.dropout, standardizer,
    )


@dataclass
class SweepMember:
    mode: str
    seed: int
    model: Optional[EmulatorModel]
    log: TrainLog


def run_instance(
    mode: str,
    seed: int,
    train: PairedDataset,
    val: PairedDataset,
    plan: TrainPlan,
    arch: ArchSpec,
) -> SweepMember:
    """Один экземпляр серии; расхождение записывается в журнал."""
    model = init_model(arch, train.d, train.m, seed, train.standardizer)
    log = TrainLog(seed=seed, mode=mode)
    started = time.perf_counter()
    try:
        if mode == 'tl':
            train_transfer(model, train, val, plan, log)
        else:
            train_baseline(model, train, val, plan, log)
    except TrainingDivergedError as error:
        log.error = error.message
        model = None
    log.wall_clock = time.perf_counter() - started
    logger.info(
        'Режим %s, зерно %d: лучшая эпоха %s, вал. LL %s, %.1f с',
        mode, seed, log.best_epoch, log.best_val_ll, log.wall_clock,
    )
    if model is not None:
        model.provenance = dict(
            mode=mode,
            seed=seed,
            best_epoch=log.best_epoch,
            best_val_ll=log.best_val_ll,
        )
    return SweepMember(mode, seed, model, log)


async def seed_sweep(
    plan: TrainPlan,
    train: PairedDataset,
    val: PairedDataset,
    arch: ArchSpec,
    master_seed: int,
    modes: Sequence[str] = ('tl',),
    threads: int = 1,
) -> List[SweepMember]:
    """
    Параллельно обучить plan.n_seeds экземпляров для каждого режима.

    Экземпляр i использует зерно master_seed XOR i. Разошедшиеся
    экземпляры остаются в результате с записанной ошибкой.
    """
    semaphore = asyncio.Semaphore(max(1, threads))
    jobs = [
        (mode, master_seed ^ i)
        for mode in modes
        for i in range(plan.n_seeds)
    ]

    async def run(mode, seed):
        async with semaphore:
            return await asyncio.to_thread(
                run_instance, mode, seed, train, val, plan, arch
            )

    results = await asyncio.gather(
        *(run(mode, seed) for mode, seed in jobs), return_exceptions=True
    )
    members: List[SweepMember] = []
    for result in results:
        if isinstance(result, Exception):
            raise result
        members.append(result)
    failed = [m.seed for m in members if not m.log.ok]
    if failed:
        logger.warning(
            'Экземпляры с зёрнами %s разошлись и исключены из статистики',
            failed,
        )
    return members
