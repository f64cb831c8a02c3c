"""
Двоичные форматы наборов данных (CGD1) и артефактов моделей (CGM1).

Все числа little-endian, массивы float64 построчно по времени. Последние
четыре байта файла: CRC-32 всех предшествующих байтов.
"""
import json
import logging
from pathlib import Path
import struct
import zlib

import numpy as np

from .coarsegrain import PairedDataset, Standardizer
from .constants import (
    DATASET_MAGIC,
    FORMAT_VERSION,
    MODEL_MAGIC,
    SYSTEM_TAGS
)
from .error_handlers import DatasetError, FormatVersionError
from .neuralnet import ParamStore
from .seqmodel import EmulatorModel

logger = logging.getLogger(__name__)

DATASET_HEADER = struct.Struct('<4sIBdIII32s')
MODEL_HEADER = struct.Struct('<4sII')
TRAILER = struct.Struct('<I')
F64 = np.dtype('<f8')
TAG_SYSTEMS = {tag: system for system, tag in SYSTEM_TAGS.items()}


def _f64_bytes(array) -> bytes:
    return np.ascontiguousarray(array, dtype=F64).tobytes()


def _hash_bytes(config_hash: str) -> bytes:
    return bytes.fromhex(config_hash) if config_hash else bytes(32)


def _check_magic_version(magic, expected_magic, version, path):
    if magic != expected_magic:
        raise DatasetError(
            f'Файл {path} не является файлом {expected_magic.decode()}'
        )
    if version != FORMAT_VERSION:
        raise FormatVersionError(version, FORMAT_VERSION, path)


def dataset_bytes(ds: PairedDataset, config_hash: str = '') -> bytes:
    """Сериализует набор (X и Y в физических единицах) со стандартизатором."""
    if ds.standardizer is None:
        raise DatasetError('Набору данных не назначен стандартизатор')
    T, d = ds.X.shape
    std = ds.standardizer
    payload = b''.join([
        DATASET_HEADER.pack(
            DATASET_MAGIC, FORMAT_VERSION, SYSTEM_TAGS[ds.system],
            ds.dt_coarse, T, d, ds.m, _hash_bytes(config_hash),
        ),
        _f64_bytes(std.x_mean), _f64_bytes(std.x_scale),
        _f64_bytes(std.y_mean), _f64_bytes(std.y_scale),
        _f64_bytes(ds.X),
        _f64_bytes(ds.Y),
    ])
    return payload + TRAILER.pack(zlib.crc32(payload))


def save_dataset(path, ds: PairedDataset, config_hash: str = '') -> int:
    """Записывает набор; возвращает CRC-32 содержимого."""
    data = dataset_bytes(ds, config_hash)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info('Записан набор данных %s (%d байт)', path, len(data))
    return TRAILER.unpack(data[-TRAILER.size:])[0]


def _read_exact(handle, size, path):
    data = handle.read(size)
    if len(data) != size:
        raise DatasetError(f'Файл {path} обрезан')
    return data


def read_dataset_header(path) -> dict:
    with open(path, 'rb') as handle:
        raw = _read_exact(handle, DATASET_HEADER.size, path)
    magic, version, tag, dt, T, d, m, digest = DATASET_HEADER.unpack(raw)
    _check_magic_version(magic, DATASET_MAGIC, version, path)
    if tag not in TAG_SYSTEMS:
        raise DatasetError(f'Неизвестный код системы {tag} в файле {path}')
    return dict(
        version=version, system=TAG_SYSTEMS[tag], dt=dt, T=T, d=d, m=m,
        config_hash=digest.hex(),
    )


def load_dataset(path, read_y: bool = True) -> PairedDataset:
    """
    Читает набор данных.

    При `read_y=False` блок Y не читается с диска, а контрольная сумма не
    проверяется.
    """
    header = read_dataset_header(path)
    T, d, m = header['T'], header['d'], header['m']
    dm = d * m
    expected = (
        DATASET_HEADER.size + 8 * (2 * d + 2 * dm + T * d + T * dm)
        + TRAILER.size
    )
    size = Path(path).stat().st_size
    if size != expected:
        raise DatasetError(
            f'Размер файла {path} {size} не совпадает с заголовком '
            f'({expected})'
        )
    with open(path, 'rb') as handle:
        head = _read_exact(handle, DATASET_HEADER.size, path)
        blocks = _read_exact(handle, 8 * (2 * d + 2 * dm + T * d), path)
        tail = b''
        if read_y:
            tail = _read_exact(handle, 8 * T * dm + TRAILER.size, path)
    values = np.frombuffer(blocks, dtype=F64)
    x_mean, x_scale = values[:d], values[d:2 * d]
    y_mean = values[2 * d:2 * d + dm]
    y_scale = values[2 * d + dm:2 * d + 2 * dm]
    X = values[2 * d + 2 * dm:].reshape(T, d)
    Y = None
    if read_y:
        (crc,) = TRAILER.unpack(tail[-TRAILER.size:])
        if zlib.crc32(head + blocks + tail[:-TRAILER.size]) != crc:
            raise DatasetError(f'Контрольная сумма файла {path} не совпадает')
        Y = np.frombuffer(tail[:-TRAILER.size], dtype=F64).reshape(T, dm)
    standardizer = Standardizer(
        x_mean.copy(), x_scale.copy(), y_mean.copy(), y_scale.copy()
    )
    return PairedDataset(
        X.copy(), None if Y is None else Y.copy(), header['dt'],
        header['system'], m, standardizer,
    )


def model_bytes(model: EmulatorModel, config_hash: str = '') -> bytes:
    store = model.store
    names = store.names()
    std = model.standardizer
    meta = dict(
        architecture=model.architecture(),
        provenance=model.provenance,
        config_hash=config_hash or model.config_hash,
        tensors=[dict(name=n, shape=list(store[n].shape)) for n in names],
        has_standardizer=std is not None,
    )
    meta_raw = json.dumps(meta, sort_keys=True).encode('utf-8')
    parts = [
        MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, len(meta_raw)),
        meta_raw,
    ]
    parts.extend(_f64_bytes(store[n]) for n in names)
    if std is not None:
        parts.extend(
            _f64_bytes(a)
            for a in (std.x_mean, std.x_scale, std.y_mean, std.y_scale)
        )
    payload = b''.join(parts)
    return payload + TRAILER.pack(zlib.crc32(payload))


def save_model(path, model: EmulatorModel, config_hash: str = '') -> int:
    data = model_bytes(model, config_hash)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info('Записана модель %s', path)
    return TRAILER.unpack(data[-TRAILER.size:])[0]


def load_model(path) -> EmulatorModel:
    """Читает артефакт модели; параметры восстанавливаются побитово."""
    data = Path(path).read_bytes()
    if len(data) < MODEL_HEADER.size + TRAILER.size:
        raise DatasetError(f'Файл {path} обрезан')
    magic, version, meta_len = MODEL_HEADER.unpack_from(data)
    _check_magic_version(magic, MODEL_MAGIC, version, path)
    (crc,) = TRAILER.unpack(data[-TRAILER.size:])
    if zlib.crc32(data[:-TRAILER.size]) != crc:
        raise DatasetError(f'Контрольная сумма файла {path} не совпадает')
    offset = MODEL_HEADER.size
    meta = json.loads(data[offset:offset + meta_len].decode('utf-8'))
    offset += meta_len
    values = np.frombuffer(data[offset:-TRAILER.size], dtype=F64)
    store = ParamStore()
    cursor = 0
    for tensor in meta['tensors']:
        size = int(np.prod(tensor['shape'], dtype=np.int64))
        store.add(
            tensor['name'],
            values[cursor:cursor + size].reshape(tensor['shape']),
        )
        cursor += size
    arch = meta['architecture']
    standardizer = None
    if meta['has_standardizer']:
        d, dm = arch['d'], arch['d'] * arch['m']
        chunks = []
        for width in (d, d, dm, dm):
            chunks.append(values[cursor:cursor + width].copy())
            cursor += width
        standardizer = Standardizer(*chunks)
    if cursor != len(values):
        raise DatasetError(f'Размер данных файла {path} не совпадает')
    model = EmulatorModel(
        store=store,
        standardizer=standardizer,
        provenance=meta['provenance'],
        config_hash=meta['config_hash'],
        **arch,
    )
    return model
