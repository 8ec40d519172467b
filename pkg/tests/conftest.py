import numpy as np
import pytest

from certdispatch.ed_model import DispatchModel
from certdispatch.grid import load_case
from certdispatch.proxies import DualProxy, InputScaler, PrimalProxy
from certdispatch.rng import stream
from certdispatch.training import SamplerConfig, sample_pd

WIDE = SamplerConfig(global_scale_range=(0.5, 1.9))


@pytest.fixture(scope="session")
def toy():
    return load_case("toy14")


@pytest.fixture(scope="session")
def toy_model(toy):
    return DispatchModel.from_grid(toy)


@pytest.fixture(scope="session")
def two_bus_model():
    return DispatchModel.from_grid(load_case("two_bus"))


def demands(grid, n, seed=0, sampler=WIDE):
    return sample_pd(grid, sampler, n, stream(seed, "tests"))


def untrained(model, pd, seed=0, hidden=(16, 16)):
    scaler = InputScaler.fit(model, pd)
    rng = stream(seed, "init")
    primal = PrimalProxy.init(model, scaler, rng, hidden)
    dual = DualProxy.init(model, scaler, rng, hidden)
    primal.net.training = dual.net.training = False
    return primal, dual


def randomize_flow_duals(dual, seed, size=1.0):
    """Untrained dual nets start at pi = 0; perturb them to exercise every path."""
    rng = np.random.default_rng(seed)
    W = dual.net.weights[-1]
    W[:, 1:] = size * rng.standard_normal(W[:, 1:].shape)


@pytest.fixture(scope="session")
def quick_checkpoint(toy):
    """A briefly trained proxy pair: certificates are finite but loose."""
    from certdispatch.training import TrainConfig, train_joint

    cfg = TrainConfig(epochs=40, batch_size=64, train_samples_per_epoch=512, val_samples=256,
                      hidden=(16, 16), seed=0)
    return train_joint(toy, cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
    for line in mod.CURVES:
        terminalreporter.write_line(line)
