"""Конфигурация эксперимента: пресеты paper и desk, файл и переопределения."""
import dataclasses
from dataclasses import dataclass, field
import hashlib
import json
from typing import Mapping, Optional

from dotenv import dotenv_values

from .coarsegrain import CoarsenSpec, SplitPlan
from .constants import ARCHITECTURES, PRESETS, SYSTEMS, WARMUP_STEPS
from .dynsys import BrusselatorSpec, KsSpec, L96Spec, SystemSpec
from .error_handlers import ValidationError
from .training import ArchSpec, TrainPlan

SECTIONS = ('dynamics', 'coarsen', 'split', 'plan', 'arch', 'forecast')
TOP_LEVEL = ('master_seed',)


@dataclass(frozen=True)
class ForecastPlan:
    n_inits: int = 500
    n_members: int = 40
    n_steps: int = 500
    warmup: int = WARMUP_STEPS

    def __post_init__(self):
        if min(self.n_inits, self.n_members, self.n_steps) < 1:
            raise ValidationError('Параметры прогноза должны быть >= 1')
        if self.warmup < 0:
            raise ValidationError('warmup не может быть отрицательным')


@dataclass(frozen=True)
class ExperimentConfig:
    system: str
    preset: str
    dynamics: SystemSpec
    coarsen: CoarsenSpec
    split: SplitPlan
    plan: TrainPlan
    arch: ArchSpec
    forecast: ForecastPlan = field(default_factory=ForecastPlan)
    master_seed: int = 0
    output_dir: str = 'output'

    def to_dict(self) -> dict:
        """Все поля, кроме каталога вывода."""
        data = dataclasses.asdict(self)
        data.pop('output_dir')
        return data

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @property
    def coarse_total(self) -> int:
        return self.split.total_len

    @property
    def fine_samples(self) -> int:
        return self.coarse_total * self.coarsen.temporal_factor


_PAPER_LENGTHS = {
    'ks': SplitPlan(10_000, 10_000, 30_000, 1_000),
    'brusselator': SplitPlan(600, 10_000, 30_000, 1_000),
    'l96': SplitPlan(400, 10_000, 30_000, 1_000),
}
_DESK_LENGTHS = {
    'ks': SplitPlan(2_000, 1_000, 2_000, 100),
    'brusselator': SplitPlan(600, 1_000, 2_000, 100),
    'l96': SplitPlan(400, 2_000, 4_000, 100),
}
_DESK_PHASE2 = {'ks': 60, 'brusselator': 100, 'l96': 100}
_COARSEN = {'ks': (5, 5), 'brusselator': (5, 8), 'l96': (1, 1)}


def _dynamics(system: str, preset: str) -> SystemSpec:
    if system == 'ks':
        return KsSpec() if preset == 'paper' else KsSpec(spinup_steps=2_000)
    if system == 'brusselator':
        if preset == 'paper':
            return BrusselatorSpec()
        return BrusselatorSpec(domain_size=32, spinup_steps=2_000)
    return L96Spec()


def default_config(
    system: str, preset: str = 'paper', output_dir: str = 'output'
) -> ExperimentConfig:
    """Пресет paper повторяет статью, desk только уменьшает размеры."""
    if system not in SYSTEMS:
        raise ValidationError(
            f'Неизвестная система {system!r}: {", ".join(SYSTEMS)}'
        )
    if preset not in PRESETS:
        raise ValidationError(
            f'Неизвестный пресет {preset!r}: {", ".join(PRESETS)}'
        )
    hidden, units_x, units_y, lr, phase2 = ARCHITECTURES[system]
    temporal, spatial = _COARSEN[system]
    if preset == 'paper':
        split = _PAPER_LENGTHS[system]
        plan = TrainPlan(phase2_epochs=phase2, lr=lr)
        forecast = ForecastPlan()
    else:
        split = _DESK_LENGTHS[system]
        plan = TrainPlan(
            phase2_epochs=_DESK_PHASE2[system], lr=lr, n_seeds=5
        )
        forecast = ForecastPlan(n_inits=50, n_members=10, n_steps=200)
    return ExperimentConfig(
        system=system,
        preset=preset,
        dynamics=_dynamics(system, preset),
        coarsen=CoarsenSpec(system, temporal, spatial),
        split=split,
        plan=plan,
        arch=ArchSpec(hidden, units_x, units_y),
        forecast=forecast,
        output_dir=output_dir,
    )


def _cast(current, raw: str):
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered not in ('1', '0', 'true', 'false', 'yes', 'no'):
            raise ValidationError(f'Ожидается логическое значение: {raw!r}')
        return lowered in ('1', 'true', 'yes')
    try:
        return type(current)(raw.strip())
    except ValueError:
        raise ValidationError(
            f'Значение {raw!r} нельзя привести к {type(current).__name__}'
        )


def apply_overrides(
    config: ExperimentConfig, overrides: Mapping[str, str]
) -> ExperimentConfig:
    """
    Применяет переопределения вида `section.field=value`.

    Значения приводятся к типу текущего значения поля; неизвестные ключи
    отклоняются.
    """
    sections = {}
    top = {}
    for key, raw in overrides.items():
        if raw is None:
            raise ValidationError(f'Для ключа {key} не задано значение')
        if key in TOP_LEVEL:
            top[key] = _cast(getattr(config, key), raw)
            continue
        section, _, name = key.partition('.')
        if section not in SECTIONS or not name:
            raise ValidationError(f'Неизвестный ключ конфигурации {key!r}')
        current = getattr(config, section)
        if name not in {f.name for f in dataclasses.fields(current)}:
            raise ValidationError(f'Неизвестный ключ конфигурации {key!r}')
        sections.setdefault(section, {})[name] = _cast(
            getattr(current, name), raw
        )
    updated = {
        section: dataclasses.replace(getattr(config, section), **values)
        for section, values in sections.items()
    }
    return dataclasses.replace(config, **updated, **top)


def parse_assignments(assignments) -> dict:
    result = {}
    for item in assignments or ():
        key, sep, value = item.partition('=')
        if not sep:
            raise ValidationError(
                f'Ожидается присваивание section.field=value: {item!r}'
            )
        result[key.strip()] = value
    return result


def load_config(
    system: str,
    preset: str = 'paper',
    config_file: Optional[str] = None,
    assignments=(),
    master_seed: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Пресет, затем файл конфигурации, затем флаги командной строки."""
    config = default_config(system, preset)
    if config_file:
        config = apply_overrides(config, dotenv_values(config_file))
    config = apply_overrides(config, parse_assignments(assignments))
    if master_seed is not None:
        config = dataclasses.replace(config, master_seed=master_seed)
    if output_dir is not None:
        config = dataclasses.replace(config, output_dir=output_dir)
    return config
