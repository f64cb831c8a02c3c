"""Команды конвейера: `flask --app cgemu <команда> ...`."""
import asyncio
import csv
from dataclasses import replace
from functools import wraps
import json
from pathlib import Path

import click
from flask import current_app
import numpy as np

from . import app
from .coarsegrain import (
    apply_standardizer,
    build_paired_dataset,
    fit_standardizer,
    split_with_buffer,
    with_standardizer
)
from .config import load_config
from .constants import FD_TOLERANCE, MODES, PRESETS, SPLITS, SYSTEMS
from .dynsys import generate_trajectory
from .error_handlers import (
    DatasetError,
    PipelineError,
    handle_pipeline_errors
)
from .evaluation import (
    FORECAST_HEADER,
    INDICATOR_HEADER,
    SeedScore,
    forecast_ensemble,
    holdout_loglik,
    per_seed_rows,
    prepare_inits,
    summarize_forecast,
    summarize_sweep,
    tl_benefit_indicator
)
from .seqmodel import build_model, check_gradients
from .storage import (
    load_dataset,
    load_model,
    read_dataset_header,
    save_dataset,
    save_model
)
from .training import (
    ArchSpec,
    init_model,
    seed_sweep
)
from .validators import validate_config

FORECAST_STREAM = 7
GRADCHECK_WIDTH = 8
GRADCHECK_M = 4
GRADCHECK_STEPS = 5


EXPERIMENT_OPTIONS = (
    click.option(
        '--system', type=click.Choice(SYSTEMS), default='l96',
        show_default=True, help='Динамическая система.',
    ),
    click.option(
        '--preset', type=click.Choice(PRESETS), default='paper',
        show_default=True, help='Масштаб эксперимента.',
    ),
    click.option(
        '--config', 'config_file', type=click.Path(dir_okay=False),
        default=None, help='Файл конфигурации section.field=value.',
    ),
    click.option(
        '--set', 'assignments', multiple=True, metavar='SECTION.FIELD=VALUE',
        help='Переопределение поля конфигурации.',
    ),
    click.option('--seed', 'master_seed', type=int, default=None),
    click.option('--out', 'output_dir', default='output', show_default=True),
)


def experiment_options(command):
    """
    Общие параметры всех команд.

    Собирает и проверяет ExperimentConfig и передаёт его команде первым
    аргументом; ошибки конвейера превращаются в код завершения.
    """

    @handle_pipeline_errors
    @wraps(command)
    def wrapper(system, preset, config_file, assignments, master_seed,
                output_dir, **kwargs):
        if config_file and not Path(config_file).is_file():
            raise DatasetError(f'Файл конфигурации {config_file} не найден')
        config = validate_config(load_config(
            system, preset, config_file, assignments, master_seed, output_dir
        ))
        return command(config, **kwargs)

    for option in reversed(EXPERIMENT_OPTIONS):
        wrapper = option(wrapper)
    return wrapper


def _root(config) -> Path:
    return Path(config.output_dir) / config.system


def _dataset_path(config, split: str) -> Path:
    return _root(config) / 'data' / f'{split}.cgd'


def _model_dir(config, mode: str) -> Path:
    return _root(config) / 'models' / mode


def _write_csv(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        csv.writer(handle, lineterminator='\n').writerows(rows)
    current_app.logger.info('Записан отчёт %s', path)


def _load_split(config, split: str, read_y: bool):
    path = _dataset_path(config, split)
    if not path.is_file():
        raise DatasetError(
            f'Набор данных {path} не найден, сначала выполните simulate'
        )
    return load_dataset(path, read_y=read_y)


def _read_manifest(config, mode: str) -> dict:
    path = _model_dir(config, mode) / 'manifest.json'
    if not path.is_file():
        raise DatasetError(
            f'Манифест {path} не найден, сначала выполните train --mode {mode}'
        )
    return json.loads(path.read_text(encoding='utf-8'))


def _load_models(config, mode: str) -> list:
    return [
        load_model(_root(config) / relative)
        for relative in _read_manifest(config, mode)['models']
    ]


@app.cli.command('simulate')
@experiment_options
def simulate_command(config):
    """Смоделировать систему и записать разбиения train/val/holdout."""
    config_hash = config.config_hash()
    fine = generate_trajectory(
        config.dynamics, config.master_seed, config.fine_samples
    )
    paired = build_paired_dataset(fine, config.coarsen)
    splits = split_with_buffer(paired, config.split)
    standardizer = fit_standardizer(splits[0])
    for name, part in zip(SPLITS, splits):
        path = _dataset_path(config, name)
        crc = save_dataset(
            path, with_standardizer(part, standardizer), config_hash
        )
        click.echo(f'{path}: T={len(part)}, crc32={crc:08x}')


@app.cli.command('train')
@click.option(
    '--mode', type=click.Choice(MODES), default='tl', show_default=True,
    help='tl: с переносом, baseline: без переноса.',
)
@experiment_options
def train_command(config, mode):
    """Обучить серию из plan.n_seeds моделей в выбранном режиме."""
    read_y = mode == 'tl'
    train, val = (
        _load_split(config, split, read_y) for split in ('train', 'val')
    )
    standardizer = train.standardizer
    train = apply_standardizer(train, standardizer)
    val = apply_standardizer(val, standardizer)
    plan = replace(config.plan, mode=mode)
    current_app.logger.info(
        'Обучение %s: %d зёрен, потоков %d',
        mode, plan.n_seeds, current_app.config['THREADS'],
    )
    members = asyncio.run(seed_sweep(
        plan, train, val, config.arch, config.master_seed,
        modes=(mode,), threads=current_app.config['THREADS'],
    ))
    config_hash = replace(config, plan=plan).config_hash()
    model_dir = _model_dir(config, mode)
    root = _root(config)
    models, failed = [], []
    for member in members:
        _write_csv(
            root / 'logs' / mode / f'seed_{member.seed}.csv',
            [('epoch', 'phase', 'train_nll', 'val_ll'), *member.log.rows()],
        )
        if not member.log.ok:
            failed.append(dict(seed=member.seed, error=member.log.error))
            continue
        path = model_dir / f'seed_{member.seed}.cgm'
        save_model(path, member.model, config_hash)
        models.append(path.relative_to(root).as_posix())
    manifest = dict(
        mode=mode,
        system=config.system,
        config_hash=config_hash,
        n_seeds=plan.n_seeds,
        models=models,
        failed=failed,
    )
    model_dir.mkdir(parents=True, exist_ok=True)
    (model_dir / 'manifest.json').write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8'
    )
    click.echo(
        f'Обучено моделей: {len(models)} из {plan.n_seeds} ({mode})'
    )


def _scores(models, holdout) -> list:
    scores = []
    for model in models:
        X = model.standardizer.standardize_x(holdout.X)
        scores.append(SeedScore(
            seed=model.provenance['seed'],
            val_ll=model.provenance['best_val_ll'],
            holdout_ll=holdout_loglik(model, X),
        ))
    return scores


@app.cli.command('evaluate')
@experiment_options
def evaluate_command(config):
    """Сводка LL на отложенной выборке: Max и Average +- 95% для режимов."""
    holdout = _load_split(config, 'holdout', read_y=False)
    scores = {
        mode: _scores(_load_models(config, mode), holdout) for mode in MODES
    }
    tl, baseline, rows = summarize_sweep(
        scores['tl'], scores['baseline'], config.system
    )
    reports = _root(config) / 'reports'
    _write_csv(reports / 'summary.csv', rows)
    _write_csv(reports / 'per_seed.csv', per_seed_rows(tl, baseline))
    for summary in (tl, baseline):
        click.echo(
            f'{summary.mode}: max {summary.max_ll:.4f} (зерно '
            f'{summary.max_seed}), среднее {summary.average:.4f} '
            f'+- {summary.half_width:.4f}'
        )


@app.cli.command('forecast')
@experiment_options
def forecast_command(config):
    """Ансамблевые прогнозы лучшей по валидации модели каждого режима."""
    plan = config.forecast
    holdout = _load_split(config, 'holdout', read_y=False)
    reports = _root(config) / 'reports'
    for mode in MODES:
        model = max(
            _load_models(config, mode),
            key=lambda model: model.provenance['best_val_ll'],
        )
        inits = prepare_inits(
            model, holdout.X, plan.n_inits, plan.n_steps,
            np.random.default_rng([config.master_seed, FORECAST_STREAM]),
            plan.warmup,
        )
        ensemble = forecast_ensemble(
            model, inits, plan.n_members, plan.n_steps, config.master_seed
        )
        summary = summarize_forecast(
            ensemble,
            np.stack([init.truth for init in inits]),
            meta=dict(mode=mode, seed=model.provenance['seed']),
        )
        _write_csv(
            reports / f'forecast_{mode}.csv',
            [FORECAST_HEADER, *summary.rows()],
        )
        click.echo(
            f'{mode}: зерно {model.provenance["seed"]}, ошибка на последнем '
            f'шаге {summary.error[-1]:.4f}, разброс {summary.spread[-1]:.4f}'
        )


@app.cli.command('indicator')
@click.option(
    '--train-len', 'train_lens', type=int, multiple=True,
    help='Длина обучающей выборки; можно указать несколько раз.',
)
@experiment_options
def indicator_command(config, train_lens):
    """Индикатор пользы переноса для построенной архитектуры."""
    header = read_dataset_header(_dataset_path(config, 'train'))
    model = init_model(
        config.arch, header['d'], header['m'], config.master_seed
    )
    rows = [INDICATOR_HEADER]
    for train_len in train_lens or (config.split.train_len,):
        report = tl_benefit_indicator(model.n_params, header['d'], train_len)
        rows.append((
            config.system, report.n_params, report.d, report.train_len,
            report.value, int(report.flagged),
        ))
        click.echo(
            f'N={train_len}: индикатор {report.value:.6g}'
            + (' (перенос, вероятно, мало полезен)' if report.flagged else '')
        )
    _write_csv(_root(config) / 'reports' / 'indicator.csv', rows)


@app.cli.command('check-gradients')
@experiment_options
def check_gradients_command(config):
    """Сверка градиентов с конечными разностями на уменьшенной ширине."""
    arch = ArchSpec(
        *(min(width, GRADCHECK_WIDTH) for width in (
            config.arch.hidden, config.arch.head_x_units,
            config.arch.head_y_units,
        )),
        dropout=config.arch.dropout,
    )
    rng = np.random.default_rng(config.master_seed)
    d, m = GRADCHECK_WIDTH, GRADCHECK_M
    model = build_model(
        d, m, arch.hidden, arch.head_x_units, arch.head_y_units, rng,
        arch.dropout,
    )
    X = rng.standard_normal((GRADCHECK_STEPS, d))
    Y = rng.standard_normal((GRADCHECK_STEPS, d * m))
    error = check_gradients(model, X, Y, seed=config.master_seed)
    click.echo(f'Максимальная относительная ошибка: {error:.3e}')
    if error > FD_TOLERANCE:
        raise PipelineError(
            f'Ошибка градиента {error:.3e} превышает {FD_TOLERANCE:g}'
        )
