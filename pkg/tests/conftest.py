from pathlib import Path
import sys

import numpy as np
import pytest

BASE_DIR = Path(__file__).resolve(strict=True).parent.parent
sys.path.append(str(BASE_DIR))

try:
    from cgemu import app
    from cgemu.coarsegrain import (
        PairedDataset,
        apply_standardizer,
        fit_standardizer
    )
    from cgemu.dynsys import BrusselatorSpec, KsSpec, L96Spec
    from cgemu.seqmodel import build_model
    from cgemu.training import TrainPlan
except ImportError as exc:
    raise AssertionError(
        'При попытке импорта пакета `cgemu` возникло исключение: '
        f'`{type(exc).__name__}: {exc}`'
    )


@pytest.fixture
def default_app():
    with app.app_context():
        yield app


@pytest.fixture
def cli_runner():
    return app.test_cli_runner()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_ks():
    return KsSpec(grid_points=20, L=22, spinup_steps=0)


@pytest.fixture
def small_brusselator():
    return BrusselatorSpec(domain_size=8, spinup_steps=0)


@pytest.fixture
def small_l96():
    return L96Spec(K=4, J=3, spinup_steps=0)


def make_paired(rng, T=240, d=3, m=2, with_y=True):
    """Гладкий синтетический набор: X равен средним блоков Y."""
    t = np.arange(T)[:, None]
    phases = rng.uniform(0, 2 * np.pi, d * m)
    Y = np.sin(0.05 * t + phases) + 0.05 * rng.standard_normal((T, d * m))
    X = Y.reshape(T, d, m).mean(axis=2)
    return PairedDataset(X, Y if with_y else None, 0.01, 'ks', m)


@pytest.fixture
def paired(rng):
    ds = make_paired(rng)
    return apply_standardizer(ds, fit_standardizer(ds))


@pytest.fixture
def small_model(rng):
    return build_model(3, 2, 4, 5, 6, rng)


@pytest.fixture
def quick_plan():
    return TrainPlan(
        phase1_epochs=2,
        phase2_epochs=3,
        tbptt_len=10,
        batch_size=4,
        lr=0.01,
        patience=2,
        n_seeds=2,
    )
