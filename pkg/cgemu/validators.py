from .config import ExperimentConfig
from .error_handlers import ValidationError


def validate_coarsening(config: ExperimentConfig):
    """Коэффициент огрубления должен делить сетку без остатка."""
    coarsen = config.coarsen
    if coarsen.system != config.system:
        raise ValidationError(
            f'coarsen.system={coarsen.system!r} не совпадает с системой '
            f'{config.system!r}'
        )
    if config.system == 'l96':
        if coarsen.spatial_factor != 1:
            raise ValidationError(
                'Для L96 пространственное огрубление не применяется'
            )
        return
    n = config.dynamics.layout['shape'][0]
    if n % coarsen.spatial_factor:
        raise ValidationError(
            f'Коэффициент {coarsen.spatial_factor} не делит сетку {n}'
        )


def validate_windows(config: ExperimentConfig):
    train_len = config.split.train_len
    if config.plan.tbptt_len + 1 > train_len:
        raise ValidationError(
            f'Окно {config.plan.tbptt_len} + 1 длиннее обучающего '
            f'разбиения ({train_len})'
        )


def validate_forecast(config: ExperimentConfig):
    forecast = config.forecast
    need = forecast.warmup + forecast.n_steps + 1
    if need > config.split.holdout_len:
        raise ValidationError(
            f'Прогрев {forecast.warmup} и прогноз {forecast.n_steps} шагов '
            f'не помещаются в отложенную выборку '
            f'({config.split.holdout_len})'
        )


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    """Перекрёстные проверки полей конфигурации эксперимента."""
    validate_coarsening(config)
    validate_windows(config)
    validate_forecast(config)
    return config
