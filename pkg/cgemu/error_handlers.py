from functools import wraps
import logging
import sys

import click

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    """
    Базовое исключение конвейера.

    Хранит сообщение об ошибке и код завершения процесса, с которым
    команда командной строки должна завершиться.
    """

    exit_code = 1

    def __init__(self, message, exit_code=None):
        """Инициализирует исключение с сообщением и кодом завершения."""
        super().__init__(message)
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code

    def to_dict(self):
        """Преобразует исключение в словарь для отчётов и логов."""
        return dict(error=type(self).__name__, message=self.message)


class ValidationError(PipelineError):
    """Некорректная конфигурация, форма массива или предусловие."""

    exit_code = 2


class IntegrationError(PipelineError):
    """Нефинитное значение или взрыв решения при интегрировании."""

    def __init__(self, message, step=None, stage=None):
        super().__init__(message)
        self.step = step
        self.stage = stage

    def to_dict(self):
        data = super().to_dict()
        data.update(step=self.step, stage=self.stage)
        return data


class DatasetError(PipelineError):
    """Ошибка раскладки, разбиения или целостности набора данных."""

    exit_code = 3


class FormatVersionError(DatasetError):
    """Версия файла не совпадает с поддерживаемой версией формата."""

    exit_code = 4

    def __init__(self, found, expected, path=''):
        super().__init__(
            f'Версия формата {found} файла {path} не поддерживается, '
            f'ожидается версия {expected}'
        )
        self.found = found
        self.expected = expected


class TrainingDivergedError(PipelineError):
    """Функция потерь стала нефинитной во время обучения."""

    def __init__(self, message, seed=None, epoch=None):
        super().__init__(message)
        self.seed = seed
        self.epoch = epoch


class GraphError(PipelineError):
    """Обратный проход вызван без записанного прямого прохода."""


def handle_pipeline_errors(command):
    """
    Декоратор команд командной строки.

    Перехватывает `PipelineError`, пишет сообщение в stderr и завершает
    процесс с кодом, заданным исключением.
    """

    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except PipelineError as error:
            logger.error('%s', error.to_dict())
            click.echo(f'Ошибка: {error.message}', err=True)
            sys.exit(error.exit_code)
    return wrapper
