import numpy as np
import pytest

from kifusion import _backend
from kifusion.model import Classifier
from kifusion.numkit import Rng
from kifusion.tasks import LabeledBatch, make_rotated_gaussian_stream


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per available kernel backend."""
    previous = _backend.name
    _backend.use(request.param)
    yield request.param
    _backend.use(previous)


def small_model(seed=0, input_dim=6, hidden=(5, 4), classes=3, rank=2, active=True):
    """A small classifier; ``active`` puts random values into B so every factor has gradient."""
    rng = Rng(seed)
    model = Classifier.build(input_dim, hidden, classes, rng.split(0, "model"), rank=rank, lora_alpha=4.0)
    params = model.init_params(rng.split(0, "init"), std=0.3)
    if active:
        params = params.like(rng.split(0, "active").normal(params.n, scale=0.3))
    return model, params


def small_batch(seed=0, n=7, input_dim=6, classes=3):
    rng = Rng(seed).split(0, "batch")
    return LabeledBatch(rng.normal((n, input_dim)), rng.integers(classes, n).astype(np.int64))


@pytest.fixture
def tiny_stream():
    return make_rotated_gaussian_stream(3, 3, 8, n_train=48, n_test=30, seed=0, context_offset=2.0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> one-line verdict, printed at the end of the session."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
