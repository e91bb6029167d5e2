import numpy as np
import pytest

from modsplit import analysis, bench, grad, models

from _cache import ALL_DEPS, cached

FIXTURE_SEED = 7


@pytest.fixture(scope="session")
def desk_data():
    return bench.desk_fixture(FIXTURE_SEED)


@pytest.fixture(scope="session")
def desk_tm(desk_data):
    def build():
        spec = models.desk_plain()
        return models.train(models.build_model(spec, seed=0),
                            desk_data.train, desk_data.valid,
                            bench.desk_train_config(seed=0))
    return cached("desk_tm", f"seed{FIXTURE_SEED}", ALL_DEPS, build)


@pytest.fixture(scope="session")
def desk_analysis(desk_tm, desk_data):
    def build():
        return analysis.build_analysis(desk_tm, desk_data.train, desk_data.valid,
                                       groups=8, m=200)
    return cached("desk_analysis", f"seed{FIXTURE_SEED}-g8-m200",
                  ALL_DEPS, build)


@pytest.fixture(scope="session")
def desk_grad(desk_tm, desk_data):
    """A quick 30-epoch mask-training run shared by unit tests."""
    def build():
        return grad.split(desk_tm, desk_data.train, desk_data.valid,
                          bench.desk_grad_config(seed=0, epochs=30))
    return cached("desk_grad_e30", f"seed{FIXTURE_SEED}",
                  ALL_DEPS, build)


@pytest.fixture(scope="session")
def desk_modules(desk_grad, desk_tm):
    return desk_grad.to_modules(desk_tm)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
